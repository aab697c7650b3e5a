"""Exact bias and MSE of slope estimators as Poisson-mixture series.

With ``U ~ N_p(xi, sigma^2 I)`` the law of ``||U||^2 / sigma^2`` is a Poisson
mixture of central chi-square laws ``chi^2_{p+2K}``, ``K ~ Poisson(lam)`` with
``lam = ||xi||^2 / (2 sigma^2)``.  Every expectation below is a sum over ``K``
of a central-chi-square (or Beta) expectation.

Series are truncated to a window ``[k_lo, k_hi]`` chosen so that
``bound * P(K outside window) < abs_tol``, where ``bound`` is an explicit
upper bound on the magnitude of the summand.  Summation uses ``math.fsum``
over the window in increasing ``k`` so results are reproducible bit for bit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate
from scipy.special import betaln, gammaln, pdtr, pdtrc
from scipy.stats import poisson

from .estimators import PhiPolySpec, PsiSpec, br_a, br_b, br_coefficients


class MomentWindowError(ValueError):
    """Parameters lie outside the range where the requested moment exists."""


class SeriesConvergenceError(RuntimeError):
    pass


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class MixtureParams:
    p: int
    m: int
    lam: float

    def __post_init__(self):
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")
        if self.p < 2:
            raise ValueError(f"p must be >= 2, got {self.p}")
        if self.m < 0:
            raise ValueError(f"m must be >= 0, got {self.m}")

    @classmethod
    def from_design(cls, n: int, r: int, sigma_xi2: float, sigma2: float) -> "MixtureParams":
        """Design with every coordinate of ``xi`` equal to ``sqrt(sigma_xi2)``."""
        p = n - 1
        return cls(p=p, m=n * (r - 1), lam=p * sigma_xi2 / (2.0 * sigma2))


@dataclass(frozen=True)
class SeriesControl:
    abs_tol: float = 1e-12
    max_terms: int = 100_000

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise ValueError("abs_tol must be positive")


@dataclass(frozen=True)
class QuadratureControl:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-11
    max_subdivisions: int = 200

    def __post_init__(self):
        if not self.abs_tol > 0:
            raise ValueError("abs_tol must be positive")


DEFAULT_SERIES = SeriesControl()
DEFAULT_QUAD = QuadratureControl()


# -- Poisson series ------------------------------------------------------------


@dataclass(frozen=True)
class PoissonWindow:
    ks: np.ndarray
    pmf: np.ndarray
    tail_mass: float


def _cdf_below(k: int, lam: float) -> float:
    """``P(K < k)``."""
    return 0.0 if k <= 0 else float(pdtr(k - 1, lam))


def poisson_window(lam: float, bound: float, ctl: SeriesControl = DEFAULT_SERIES) -> PoissonWindow:
    """Smallest window with ``bound * P(K outside) < abs_tol``."""
    if lam == 0.0:
        return PoissonWindow(np.array([0]), np.array([1.0]), 0.0)
    bound = max(float(bound), 1e-300)
    q = ctl.abs_tol / (2.0 * bound)
    guess = poisson.isf(q, lam) if q < 1 else 0.0
    k_hi = max(int(guess), 0) if math.isfinite(guess) else int(lam)
    while pdtrc(k_hi, lam) > q:
        k_hi += 1
    while k_hi > 0 and pdtrc(k_hi - 1, lam) <= q:
        k_hi -= 1
    guess = poisson.ppf(q, lam) if q < 1 else 0.0
    k_lo = max(int(guess), 0) if math.isfinite(guess) else 0
    while k_lo > 0 and _cdf_below(k_lo, lam) > q:
        k_lo -= 1
    while _cdf_below(k_lo + 1, lam) <= q and k_lo < k_hi:
        k_lo += 1
    if k_hi - k_lo + 1 > ctl.max_terms:
        raise SeriesConvergenceError(
            f"Poisson window [{k_lo}, {k_hi}] for lam={lam} exceeds max_terms={ctl.max_terms}"
        )
    ks = np.arange(k_lo, k_hi + 1)
    pmf = poisson.pmf(ks, lam)
    tail = _cdf_below(k_lo, lam) + float(pdtrc(k_hi, lam))
    return PoissonWindow(ks, pmf, tail)


def poisson_expectation(
    g: Callable,
    lam: float,
    ctl: SeriesControl = DEFAULT_SERIES,
    *,
    bound: float | None = None,
    full_output: bool = False,
):
    """``E[g(K)]`` for ``K ~ Poisson(lam)``.

    ``g`` must accept an integer array.  ``bound`` is an upper bound on
    ``|g|``; without it the window is grown until the largest ``|g|`` seen in
    the window stops increasing, which is adequate for ``g`` of polynomial
    growth.  With ``full_output`` the truncation bound and window are returned
    as well.
    """
    if bound is not None:
        win = poisson_window(lam, bound, ctl)
        vals = np.broadcast_to(np.asarray(g(win.ks), dtype=float), win.ks.shape)
        b = bound
    else:
        b = 1.0
        for _ in range(60):
            win = poisson_window(lam, b, ctl)
            vals = np.broadcast_to(np.asarray(g(win.ks), dtype=float), win.ks.shape)
            seen = float(np.max(np.abs(vals)))
            if seen <= b:
                break
            b = seen
        else:
            raise SeriesConvergenceError("could not bound the summand")
    if not np.all(np.isfinite(vals)):
        raise SeriesConvergenceError("non-finite summand in Poisson series")
    value = math.fsum(vals * win.pmf)
    if full_output:
        return value, b * win.tail_mass, (int(win.ks[0]), int(win.ks[-1]))
    return value


def _require(cond: bool, msg: str):
    if not cond:
        raise MomentWindowError(msg)


# -- closed-form series ----------------------------------------------------------


def bias_ls_exact(mp: MixtureParams, beta: float, ctl: SeriesControl = DEFAULT_SERIES) -> float:
    """``-E[(p-2)/(p+2K-2)] * beta``."""
    p = mp.p
    _require(p >= 3, f"LS bias series needs p >= 3 (Lemma 4), got p={p}")
    e = poisson_expectation(lambda k: (p - 2) / (p + 2.0 * k - 2), mp.lam, ctl, bound=1.0)
    return -e * beta


def _falling_ratio(p: int, k, count: int):
    """``prod_{j=1..count} (p-2j)/(p+2k-2j)``."""
    k = np.asarray(k, dtype=float)
    out = np.ones_like(k)
    for j in range(1, count + 1):
        out = out * (p - 2 * j) / (p + 2 * k - 2 * j)
    return out


def bias_br_exact(mp: MixtureParams, ell: int, beta: float, ctl: SeriesControl = DEFAULT_SERIES) -> float:
    """``-E[prod_{j=1..ell+1} (p-2j)/(p+2K-2j)] * beta``; does not depend on ``m``."""
    if ell == 0:
        return bias_ls_exact(mp, beta, ctl)
    p = mp.p
    _require(
        p >= 5 and 1 <= ell < (p - 2) / 2,
        f"BR bias series needs p >= 5 and 1 <= ell < (p-2)/2 (Lemma 5), got ell={ell}, p={p}",
    )
    e = poisson_expectation(lambda k: _falling_ratio(p, k, ell + 1), mp.lam, ctl, bound=1.0)
    return -e * beta


def mse_ls_exact(
    mp: MixtureParams, beta: float, tau2: float, sigma2: float, ctl: SeriesControl = DEFAULT_SERIES
) -> float:
    p, lam = mp.p, mp.lam
    _require(p >= 3, f"LS MSE series needs p >= 3 (Lemma 7), got p={p}")

    def term(k):
        k = np.asarray(k, dtype=float)
        first = (tau2 / sigma2) / (p + 2 * k - 2)
        second = 2 * lam * (1 + 2 * k) / ((p + 2 * k) * (p + 2 * k - 2)) - 4 * lam / (p + 2 * k) + 1.0
        return first + beta**2 * second

    bound = tau2 / sigma2 / (p - 2) + beta**2 * (2 * lam / (p - 2) + 4 * lam / p + 1.0)
    return poisson_expectation(term, lam, ctl, bound=bound)


@dataclass(frozen=True)
class MomentIdentities:
    e1: float
    e2: float | None
    inv_moments: dict[int, float] = field(default_factory=dict)


def inverse_moment(mp: MixtureParams, i: int, ctl: SeriesControl = DEFAULT_SERIES) -> float:
    """``E[sigma^{2i} / ||U||^{2i}] = E[prod_{j=1..i} 1/(p+2K-2j)]``."""
    p = mp.p
    _require(p > 2 * i, f"inverse moment of order {i} needs p > 2i (Lemma 2), got p={p}")

    def term(k):
        k = np.asarray(k, dtype=float)
        out = np.ones_like(k)
        for j in range(1, i + 1):
            out = out / (p + 2 * k - 2 * j)
        return out

    return poisson_expectation(term, mp.lam, ctl, bound=float(term(np.array([0]))[0]))


def moment_identities(
    mp: MixtureParams, orders=(1, 2), ctl: SeriesControl = DEFAULT_SERIES
) -> MomentIdentities:
    """``E[U'xi/||U||^2]``, ``E[(U'xi)^2/||U||^4]`` and inverse moments of ``||U||^2``."""
    p, lam = mp.p, mp.lam
    e1 = poisson_expectation(lambda k: 2 * lam / (p + 2.0 * k), lam, ctl, bound=2 * lam / p)
    e2 = None
    if p >= 3:
        e2 = poisson_expectation(
            lambda k: 2 * lam * (1 + 2.0 * k) / ((p + 2.0 * k) * (p + 2.0 * k - 2)),
            lam,
            ctl,
            bound=2 * lam / (p - 2),
        )
    inv = {i: inverse_moment(mp, i, ctl) for i in orders if p > 2 * i}
    return MomentIdentities(e1=e1, e2=e2, inv_moments=inv)


# -- quadrature ------------------------------------------------------------------


def _quad(f, lo, hi, qctl, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(
            f, lo, hi, epsabs=qctl.abs_tol, epsrel=qctl.rel_tol, limit=qctl.max_subdivisions, **kw
        )
    if not math.isfinite(val) or err > 100 * max(qctl.abs_tol, qctl.rel_tol * abs(val)):
        raise QuadratureError(f"quadrature on [{lo}, {hi}] did not converge (value {val}, error {err})")
    return val


def beta_integral(
    h: Callable,
    a: float,
    b: float,
    *,
    v_power: float = 0.0,
    breakpoints=(),
    qctl: QuadratureControl = DEFAULT_QUAD,
) -> float:
    """``int_0^1 h(v) v^v_power Beta(a, b)-density(v) dv``.

    Endpoint singularities of the weight (negative exponents) are handled by
    the algebraic-weight rule on the end segments; known kinks of ``h`` should
    be passed as ``breakpoints``.
    """
    alpha = a - 1.0 + v_power
    beta = b - 1.0
    log_norm = -betaln(a, b)
    mean = a / (a + b)
    sd = math.sqrt(a * b / ((a + b) ** 2 * (a + b + 1.0)))
    pts = set(x for x in breakpoints if 0.0 < x < 1.0)
    for z in (-8.0, -2.0, 0.0, 2.0, 8.0):
        x = mean + z * sd
        if 1e-9 < x < 1.0 - 1e-9:
            pts.add(x)
    edges = [0.0, *sorted(pts), 1.0]
    total = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi - lo <= 0.0:
            continue
        at0, at1 = lo == 0.0, hi == 1.0
        w0 = alpha if (at0 and alpha < 0) else 0.0
        w1 = beta if (at1 and beta < 0) else 0.0
        e0, e1 = alpha - w0, beta - w1

        def f(v, e0=e0, e1=e1):
            if v <= 0.0 or v >= 1.0:
                if (v <= 0.0 and e0 > 0) or (v >= 1.0 and e1 > 0):
                    return 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                dens = math.exp(
                    (e0 * math.log(v) if e0 else 0.0) + (e1 * math.log1p(-v) if e1 else 0.0) + log_norm
                )
            return float(h(v)) * dens

        if w0 or w1:
            total.append(_quad(f, lo, hi, qctl, weight="alg", wvar=(w0, w1)))
        else:
            total.append(_quad(f, lo, hi, qctl))
    return math.fsum(total)


def lemma1_integrals(
    mp: MixtureParams,
    phi,
    k: int,
    qctl: QuadratureControl = DEFAULT_QUAD,
    *,
    method: str = "auto",
    breakpoints_t=(),
) -> tuple[float, float]:
    """``I1(k|phi) = E[phi(W/S)]`` and ``I2(k|phi) = E[phi(W/S)/W]``.

    ``W ~ chi^2_{p+2k}`` and ``S ~ chi^2_m`` independent.  A
    :class:`PhiPolySpec` uses chi-square moments (``method="closed"``);
    anything else is integrated over ``V = W/(W+S) ~ Beta`` using
    ``W/S = V/(1-V)`` and ``E[1/(W+S)] = 1/(p+2k+m-2)``.
    """
    p, m = mp.p, mp.m
    n = p + 2 * k
    if method == "auto":
        method = "closed" if isinstance(phi, PhiPolySpec) else "quad"
    if method == "closed":
        if not isinstance(phi, PhiPolySpec):
            raise TypeError("closed form needs a PhiPolySpec")
        _require(n > 2 * (phi.degree + 1), f"I2 needs p+2k > 2(deg+1), got p+2k={n}, deg={phi.degree}")
        i1 = i2 = 0.0
        for d, c in phi.coeffs:
            inv_d = math.prod(1.0 / (n - 2 * i) for i in range(1, d + 1))
            i1 += c * br_b(m, d) * inv_d
            i2 += c * br_b(m, d) * inv_d / (n - 2 * (d + 1))
        return i1, i2
    _require(m >= 1, "quadrature path needs m >= 1")
    breakpoints_t = tuple(breakpoints_t) or tuple(getattr(phi, "breakpoints_t", ()))
    bps = [t / (1.0 + t) for t in breakpoints_t]
    def g(v):
        return phi(v / (1.0 - v) if v < 1.0 else math.inf)

    i1 = beta_integral(g, n / 2, m / 2, breakpoints=bps, qctl=qctl)
    i2 = beta_integral(g, n / 2, m / 2, v_power=-1.0, breakpoints=bps, qctl=qctl) / (n + m - 2)
    return i1, i2


# -- phi-class MSE (polynomial phi) ------------------------------------------------


def mse_phi_exact(
    mp: MixtureParams,
    phi: PhiPolySpec,
    beta: float,
    tau2: float,
    sigma2: float,
    ctl: SeriesControl = DEFAULT_SERIES,
) -> float:
    """Exact MSE of ``{1 + phi(||U||^2/S)} LS`` for polynomial ``phi``.

    Writing the multiplier as ``sum_j c_j (S/||U||^2)^j`` with ``c_0 = 1``,
    each cross product reduces to ``E[S^q] = b_q`` times an inverse moment of
    a central chi-square, mixed over ``K``.
    """
    p, m, lam = mp.p, mp.m, mp.lam
    ell = phi.degree
    _require(m >= 1 or ell == 0, "phi-class MSE needs m >= 1")
    _require(p > 4 * ell + 2, f"MSE is finite only for p > 4*deg + 2 (Lemma 8), got p={p}, deg={ell}")
    coeffs = {0: 1.0, **{d: c for d, c in phi.coeffs}}
    pairs = [(ci * cj, i + j) for i, ci in coeffs.items() for j, cj in coeffs.items()]
    singles = list(coeffs.items())

    def inv_prod(k, count):
        out = np.ones_like(k)
        for i in range(1, count + 1):
            out = out / (p + 2 * k - 2 * i)
        return out

    def parts(k, f=lambda x: x):
        k = np.asarray(k, dtype=float)
        sq = sum(f(c) * br_b(m, q) * inv_prod(k, q + 1) for c, q in pairs)
        lin = sum(f(c) * br_b(m, q) * inv_prod(k, q) for q, c in singles)
        return sq, lin

    def term(k):
        sq, lin = parts(k)
        k = np.asarray(k, dtype=float)
        control = 2 * lam * (1 + 2 * k) / (p + 2 * k) * sq - 2 * (2 * lam / (p + 2 * k)) * lin
        return (tau2 / sigma2) * sq + beta**2 * control

    # (1+2k)/(p+2k) <= 1 and every inverse product is largest at k = 0
    sq0, lin0 = (float(x[0]) for x in parts(np.array([0.0]), abs))
    bound = (tau2 / sigma2) * sq0 + beta**2 * (2 * lam * sq0 + 4 * lam / p * lin0)
    value = poisson_expectation(term, lam, ctl, bound=bound)
    return value + beta**2


def bias_phi_exact(mp: MixtureParams, phi: PhiPolySpec, beta: float, ctl: SeriesControl = DEFAULT_SERIES) -> float:
    """Bias of ``{1 + phi} LS`` for polynomial ``phi`` via chi-square moments."""
    p, m, lam = mp.p, mp.m, mp.lam
    _require(p > 2 * phi.degree, f"bias needs p > 2*deg, got p={p}")

    def term(k):
        k = np.asarray(k, dtype=float)
        inner = np.ones_like(k)
        for d, c in phi.coeffs:
            prod = np.ones_like(k)
            for i in range(1, d + 1):
                prod = prod / (p + 2 * k - 2 * i)
            inner = inner + c * br_b(m, d) * prod
        return 2 * lam / (p + 2 * k) * inner

    b0 = 2 * lam / p * (1 + sum(abs(c) * br_b(m, d) * math.prod(1 / (p - 2 * i) for i in range(1, d + 1)) for d, c in phi.coeffs))
    return (poisson_expectation(term, lam, ctl, bound=b0) - 1.0) * beta


def bias_phi_quad(
    mp: MixtureParams,
    phi: Callable,
    beta: float,
    *,
    bound: float,
    breakpoints_t=(),
    ctl: SeriesControl = DEFAULT_SERIES,
    qctl: QuadratureControl = DEFAULT_QUAD,
) -> float:
    """Bias of ``{1 + phi} LS`` for arbitrary ``phi`` by Beta quadrature per ``k``.

    ``bound`` must dominate ``1 + I1(k|phi)`` for every ``k``.
    """
    p, lam = mp.p, mp.lam
    win = poisson_window(lam, 2 * lam / p * bound, ctl)
    terms = [
        2 * lam / (p + 2 * k) * (1.0 + lemma1_integrals(mp, phi, int(k), qctl, method="quad", breakpoints_t=breakpoints_t)[0])
        for k in win.ks
    ]
    return (math.fsum(np.asarray(terms) * win.pmf) - 1.0) * beta


# -- psi-class expectations ---------------------------------------------------------


def _sup_abs(fn: Callable, grid_size: int = 20001) -> float:
    v = np.concatenate([np.logspace(-12, -2, 300), np.linspace(0, 1, grid_size)[1:-1], 1 - np.logspace(-12, -2, 300)])
    with np.errstate(all="ignore"):
        vals = np.abs(np.asarray(fn(v), dtype=float))
    return float(np.nanmax(vals))


def _psi_series(
    sq: Callable,
    lin: Callable,
    mp: MixtureParams,
    beta: float,
    tau2: float,
    sigma2: float,
    breakpoints,
    ctl: SeriesControl,
    qctl: QuadratureControl,
) -> float:
    """``tau2 E[sq(V)/||U||^2] + beta^2 sum_k (2lam/(p+2k)) P(k) H(k)``.

    ``H(k) = (1+2k)/(p+2k+m-2) int sq(v)/v f_k - 2 int lin(v) f_k``.
    """
    p, m, lam = mp.p, mp.m, mp.lam
    _require(p >= 3, f"psi-class MSE needs p >= 3, got p={p}")
    _require(m >= 1, "psi-class MSE needs m >= 1")
    sup_sq, sup_lin = _sup_abs(sq), _sup_abs(lin)
    bound = (tau2 / sigma2) * sup_sq / (p - 2) + beta**2 * (2 * lam / p) * (sup_sq + 2 * sup_lin)
    need_control = beta != 0.0 and lam > 0.0
    cache: dict[int, float] = {}

    def one(k: int) -> float:
        if k not in cache:
            n = p + 2 * k
            a_k = beta_integral(sq, n / 2, m / 2, v_power=-1.0, breakpoints=breakpoints, qctl=qctl)
            t = (tau2 / sigma2) * a_k / (n + m - 2)
            if need_control:
                b_k = beta_integral(lin, n / 2, m / 2, breakpoints=breakpoints, qctl=qctl)
                t += beta**2 * 2 * lam / n * ((1 + 2 * k) / (n + m - 2) * a_k - 2 * b_k)
            cache[k] = t
        return cache[k]

    g = lambda ks: np.array([one(int(k)) for k in ks])  # noqa: E731
    # unbounded psi (e.g. BR near v = 0): fall back to the empirical bound
    return poisson_expectation(g, lam, ctl, bound=bound if bound < 1e12 else None)


def _psi_fns(psi: PsiSpec, p: int, m: int):
    sq = lambda v: psi.evaluate(v, p, m) ** 2  # noqa: E731
    lin = lambda v: psi.evaluate(v, p, m)  # noqa: E731
    return sq, lin


def control_excess(
    psi: PsiSpec,
    mp: MixtureParams,
    ctl: SeriesControl = DEFAULT_SERIES,
    qctl: QuadratureControl = DEFAULT_QUAD,
) -> float:
    """``E[{psi(V) U'xi/||U||^2 - 1}^2] - 1`` as a series of Beta integrals."""
    sq, lin = _psi_fns(psi, mp.p, mp.m)
    return _psi_series(sq, lin, mp, 1.0, 0.0, 1.0, psi.breakpoints(mp.p, mp.m), ctl, qctl)


def control_h(psi: PsiSpec, mp: MixtureParams, k: int, qctl: QuadratureControl = DEFAULT_QUAD) -> float:
    """The per-``k`` control integral ``H_psi(k)``."""
    p, m = mp.p, mp.m
    sq, lin = _psi_fns(psi, p, m)
    n = p + 2 * k
    bps = psi.breakpoints(p, m)
    a_k = beta_integral(sq, n / 2, m / 2, v_power=-1.0, breakpoints=bps, qctl=qctl)
    b_k = beta_integral(lin, n / 2, m / 2, breakpoints=bps, qctl=qctl)
    return (1 + 2 * k) / (n + m - 2) * a_k - 2 * b_k


def mse_psi_exact(
    psi: PsiSpec,
    mp: MixtureParams,
    beta: float,
    tau2: float,
    sigma2: float,
    ctl: SeriesControl = DEFAULT_SERIES,
    qctl: QuadratureControl = DEFAULT_QUAD,
) -> float:
    """Exact MSE of ``psi(V) LS``.

    Given ``K = k``, ``V ~ Beta((p+2k)/2, m/2)`` is independent of
    ``T = S + ||U||^2 ~ sigma^2 chi^2_{p+2k+m}``, so
    ``E[psi^2(V)/||U||^2 | k] = E[psi^2(V)/V] / (sigma^2 (p+2k+m-2))``.
    """
    sq, lin = _psi_fns(psi, mp.p, mp.m)
    excess = _psi_series(sq, lin, mp, beta, tau2, sigma2, psi.breakpoints(mp.p, mp.m), ctl, qctl)
    return excess + beta**2


def bias_psi_exact(
    psi: PsiSpec,
    mp: MixtureParams,
    beta: float,
    ctl: SeriesControl = DEFAULT_SERIES,
    qctl: QuadratureControl = DEFAULT_QUAD,
) -> float:
    """Bias of ``psi(V) LS``: ``beta (sum_k 2lam/(p+2k) P(k) int psi f_k - 1)``."""
    p, m, lam = mp.p, mp.m, mp.lam
    _require(p >= 2, f"psi-class bias needs p >= 2, got p={p}")
    _require(m >= 1, "psi-class bias needs m >= 1")
    bps = psi.breakpoints(p, m)
    lin = lambda v: psi.evaluate(v, p, m)  # noqa: E731
    cache: dict[int, float] = {}

    def one(k: int) -> float:
        if k not in cache:
            n = p + 2 * k
            cache[k] = 2 * lam / n * beta_integral(lin, n / 2, m / 2, breakpoints=bps, qctl=qctl)
        return cache[k]

    sup = _sup_abs(lin)
    bound = 2 * lam / p * sup
    e = poisson_expectation(
        lambda ks: np.array([one(int(k)) for k in ks]), lam, ctl, bound=bound if bound < 1e12 else None
    )
    return (e - 1.0) * beta


def mse_psi_difference(
    psi: PsiSpec,
    psi_bar: PsiSpec,
    mp: MixtureParams,
    beta: float,
    tau2: float,
    sigma2: float,
    ctl: SeriesControl = DEFAULT_SERIES,
    qctl: QuadratureControl = DEFAULT_QUAD,
) -> float:
    """``MSE(psi V-class) - MSE(psi_bar V-class)`` integrated directly.

    Integrating the difference avoids cancellation between two nearly equal
    MSEs when the truncation is rarely active.
    """
    p, m = mp.p, mp.m
    sq = lambda v: psi.evaluate(v, p, m) ** 2 - psi_bar.evaluate(v, p, m) ** 2  # noqa: E731
    lin = lambda v: psi.evaluate(v, p, m) - psi_bar.evaluate(v, p, m)  # noqa: E731
    bps = sorted(set(psi.breakpoints(p, m)) | set(psi_bar.breakpoints(p, m)))
    return _psi_series(sq, lin, mp, beta, tau2, sigma2, bps, ctl, qctl)


# -- verification reports ---------------------------------------------------------


@dataclass(frozen=True)
class DominationReport:
    psi: str
    psi_bar: str
    p: int
    m: int
    max_square_excess: float
    max_delta: float
    worst_v_square: float
    worst_v_delta: float
    square_ok: bool
    delta_ok: bool

    @property
    def passed(self) -> bool:
        return self.square_ok and self.delta_ok


def verify_domination(psi: PsiSpec, psi_bar: PsiSpec, p: int, m: int, grid_size: int = 10_000) -> DominationReport:
    """Grid check of ``psi^2 <= psi_bar^2`` and
    ``psi^2 - psi_bar^2 - 2(p+m-2) v (psi - psi_bar) <= 0`` on ``(0, 1)``."""
    v = np.arange(1, grid_size + 1) / (grid_size + 1.0)
    a = np.asarray(psi.evaluate(v, p, m), dtype=float)
    b = np.asarray(psi_bar.evaluate(v, p, m), dtype=float)
    c = p + m - 2
    sq = a**2 - b**2
    delta = sq - 2 * c * v * (a - b)
    scale = np.maximum(1.0, np.maximum(b**2, 2 * c * v * np.abs(b)))
    tol = 1e-12 * scale
    i_sq, i_d = int(np.argmax(sq - tol)), int(np.argmax(delta - tol))
    return DominationReport(
        psi=psi.name,
        psi_bar=psi_bar.name,
        p=p,
        m=m,
        max_square_excess=float(sq.max()),
        max_delta=float(delta.max()),
        worst_v_square=float(v[i_sq]),
        worst_v_delta=float(v[i_d]),
        square_ok=bool(np.all(sq <= tol)),
        delta_ok=bool(np.all(delta <= tol)),
    )


@dataclass(frozen=True)
class Theorem1Report:
    envelope_ok: bool
    max_envelope_violation: float
    min_phi: float
    bias_phi: float | None
    bias_ls: float | None

    @property
    def bias_ok(self) -> bool | None:
        if self.bias_phi is None:
            return None
        return abs(self.bias_phi) <= abs(self.bias_ls)

    @property
    def passed(self) -> bool:
        return self.envelope_ok and bool(self.bias_ok)


def envelope(p: int, m: int, ell: int) -> Callable:
    """``2 sum_{j<=ell} (a_j/b_j) t^-j``."""
    return PhiPolySpec.br(p, m, ell, scale=2.0)


def bias_theorem1_verify(
    phi: Callable,
    mp: MixtureParams,
    ell: int,
    beta: float = 1.0,
    *,
    grid_size: int = 4000,
    breakpoints_t=(),
    ctl: SeriesControl = DEFAULT_SERIES,
    qctl: QuadratureControl = DEFAULT_QUAD,
) -> Theorem1Report:
    """Check ``0 <= phi(t) <= 2 sum (a_j/b_j) t^-j`` on a log grid, then compare
    ``|Bias(phi)|`` with ``|Bias(LS)|``.  The bias step is skipped when the
    envelope fails."""
    p, m = mp.p, mp.m
    _require(ell < (p - 2) / 2, f"need ell < (p-2)/2 (Theorem 1), got ell={ell}, p={p}")
    t = np.logspace(-6, 6, grid_size)
    with np.errstate(all="ignore"):
        vals = np.asarray(phi(t), dtype=float)
    cap = envelope(p, m, ell)(t)
    tol = 1e-12 * np.maximum(1.0, cap)
    over = vals - cap
    ok = bool(np.all(vals >= -1e-15) and np.all(over <= tol))
    if not ok:
        return Theorem1Report(False, float(np.max(over)), float(np.min(vals)), None, None)
    # 1 + I1 <= 1 + 2 sum a_j prod 1/(p-2i) = 1 + 2 ell
    b_phi = bias_phi_quad(mp, phi, beta, bound=1.0 + 2 * ell, breakpoints_t=breakpoints_t, ctl=ctl, qctl=qctl)
    b_ls = bias_ls_exact(mp, beta, ctl)
    return Theorem1Report(True, float(np.max(over)), float(np.min(vals)), b_phi, b_ls)


# -- known error variance -------------------------------------------------------------


def gamma_integral(h: Callable, n: float, *, w_power: float = 0.0, qctl: QuadratureControl = DEFAULT_QUAD) -> float:
    """``int_0^inf h(w) w^w_power g_n(w) dw`` with ``g_n`` the chi^2_n density."""
    alpha = n / 2 - 1 + w_power
    log_norm = -(n / 2) * math.log(2.0) - gammaln(n / 2)
    mean, sd = float(n), math.sqrt(2.0 * n)
    edges = [0.0] + [x for x in (mean - 4 * sd, mean, mean + 4 * sd, mean + 12 * sd) if x > 0] + [math.inf]

    def dens(w, e):
        if w <= 0.0:
            return 0.0 if e > 0 else (1.0 if e == 0 else math.inf)
        return math.exp(e * math.log(w) - w / 2 + log_norm)

    parts = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if lo == 0.0 and alpha < 0:
            parts.append(_quad(lambda w: float(h(w)) * dens(w, 0.0), lo, hi, qctl, weight="alg", wvar=(alpha, 0.0)))
        else:
            parts.append(_quad(lambda w: float(h(w)) * dens(w, alpha), lo, hi, qctl))
    return math.fsum(parts)


@dataclass(frozen=True)
class KnownVarianceMoments:
    first: float
    second: float | None
    bias: float


def known_variance_moments(
    multiplier: Callable,
    p: int,
    lam: float,
    beta: float = 1.0,
    *,
    bound: float | None = None,
    second_moment: bool = True,
    ctl: SeriesControl = DEFAULT_SERIES,
    qctl: QuadratureControl = DEFAULT_QUAD,
) -> KnownVarianceMoments:
    """Moments of ``multiplier(||U||^2) * LS`` when ``sigma^2 = 1`` is known.

    ``first = E[multiplier(W) U'xi / W]``, ``second = E[multiplier(W)^2
    (U'xi)^2 / W^2]``, each a Poisson mixture of chi-square integrals.
    ``bound`` (for ``|multiplier|`` integrated against ``g_{p+2k}``) defaults to
    the ``k = 0`` integral, which dominates for decreasing multipliers.  The
    second moment of ``1 + sum_j a_j w^-j`` is infinite unless ``p > 4 ell + 2``;
    pass ``second_moment=False`` to skip it.
    """
    _require(p >= 3, "known-variance moments need p >= 3")

    def i1(k):
        return gamma_integral(multiplier, p + 2 * k, qctl=qctl)

    def i2(k):
        return gamma_integral(lambda w: multiplier(w) ** 2, p + 2 * k, w_power=-1.0, qctl=qctl)

    b1 = bound if bound is not None else abs(i1(0))
    win = poisson_window(lam, 2 * lam / p * b1, ctl)
    first = math.fsum(np.array([2 * lam / (p + 2 * k) * i1(int(k)) for k in win.ks]) * win.pmf)
    second = None
    if not second_moment:
        pass
    elif lam > 0:
        b2 = abs(i2(0)) * (p + 2)
        win2 = poisson_window(lam, 2 * lam / p * b2, ctl)
        second = math.fsum(
            np.array([2 * lam * (1 + 2 * k) / (p + 2 * k) * i2(int(k)) for k in win2.ks]) * win2.pmf
        )
    else:
        second = 0.0
    return KnownVarianceMoments(first=first, second=second, bias=(first - 1.0) * beta)


def br_known_variance_multiplier(p: int, ell: int) -> Callable:
    coeffs = [br_a(p, j) for j in range(1, ell + 1)]

    def mult(w):
        w = np.asarray(w, dtype=float)
        out = 1.0 + sum(a / w ** (j + 1) for j, a in enumerate(coeffs))
        return out if out.ndim else float(out)

    return mult


@dataclass(frozen=True)
class KnownVarianceDominationReport:
    max_square_excess: float
    max_delta0: float

    @property
    def passed(self) -> bool:
        return self.max_square_excess <= 1e-12 and self.max_delta0 <= 1e-12


def verify_domination_known_variance(psi: Callable, psi_bar: Callable, w_max: float = 50.0, grid_size: int = 10_000):
    """Grid check of ``psi^2 <= psi_bar^2`` and
    ``psi^2 - psi_bar^2 - 2w(psi - psi_bar) <= 0`` on ``(0, w_max]``."""
    w = np.arange(1, grid_size + 1) * (w_max / grid_size)
    a = np.asarray(psi(w), dtype=float)
    b = np.broadcast_to(np.asarray(psi_bar(w), dtype=float), w.shape)
    sq = a**2 - b**2
    d0 = sq - 2 * w * (a - b)
    return KnownVarianceDominationReport(float(sq.max()), float(d0.max()))


__all__ = [
    "MixtureParams",
    "SeriesControl",
    "QuadratureControl",
    "MomentWindowError",
    "SeriesConvergenceError",
    "QuadratureError",
    "poisson_window",
    "poisson_expectation",
    "bias_ls_exact",
    "bias_br_exact",
    "mse_ls_exact",
    "moment_identities",
    "inverse_moment",
    "lemma1_integrals",
    "beta_integral",
    "mse_phi_exact",
    "bias_phi_exact",
    "bias_phi_quad",
    "control_excess",
    "control_h",
    "mse_psi_exact",
    "mse_psi_difference",
    "bias_psi_exact",
    "verify_domination",
    "bias_theorem1_verify",
    "known_variance_moments",
    "br_known_variance_multiplier",
    "verify_domination_known_variance",
    "br_coefficients",
]

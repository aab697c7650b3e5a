"""Slope and intercept estimators for the functional measurement-error model.

Every estimator is a function of :class:`~eivslope.canonical.SufficientStats`.
The functions are written elementwise, so a ``SufficientStats`` holding
arrays (one entry per Monte Carlo replication) yields an array of estimates.
For scalar input a pole raises :class:`SingularEstimateError`; for array input
the affected entries are ``nan`` so callers can count them.

Two multiplicative families organise most of the estimators:

* phi-class: ``{1 + phi(||U||^2 / S)} * LS``  (MM, Stefanski, BR and variants)
* psi-class: ``psi(V) * LS`` with ``V = ||U||^2 / (S + ||U||^2)``  (TLS, TBR,
  GG, TGG, KR)
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .canonical import SufficientStats


class SingularEstimateError(ArithmeticError):
    """The estimator has a pole at the observed statistics."""


class MomentWindowWarning(UserWarning):
    """The estimate is defined but its bias or MSE theory does not apply."""


MOMENTS_EXIST = "moments-exist"
NO_FINITE_MOMENTS = "no-finite-moments"


def _finish(value, name):
    if np.ndim(value) == 0:
        value = float(value)
        if not math.isfinite(value):
            raise SingularEstimateError(f"{name} is undefined at these statistics")
        return value
    return np.where(np.isfinite(value), value, np.nan)


def _need_replicates(st, name):
    if st.m < 1:
        raise ValueError(f"{name} needs m >= 1 (at least two replicates per group)")


# -- BR coefficients ---------------------------------------------------------


def br_a(p: int, j: int) -> int:
    """``(p-2)(p-4)...(p-2j)``."""
    return math.prod(p - 2 * i for i in range(1, j + 1))


def br_b(m: int, j: int) -> int:
    """``m(m+2)...(m+2j-2)``; also ``E[X^j]`` for ``X ~ chi^2_m``."""
    return math.prod(m + 2 * i - 2 for i in range(1, j + 1))


def br_ratio(p: int, m: int, j: int) -> Fraction:
    return Fraction(br_a(p, j), br_b(m, j))


def br_coefficients(p: int, m: int, ell: int) -> list[float]:
    """``[a_1/b_1, ..., a_ell/b_ell]`` as floats."""
    return [float(br_ratio(p, m, j)) for j in range(1, ell + 1)]


def stefanski_condition(p: int, m: int, ell: int) -> bool:
    """Exact check of ``(p/m)^ell <= 2 a_ell / b_ell``."""
    return Fraction(p, m) ** ell <= 2 * br_ratio(p, m, ell)


def check_br_window(p: int, ell: int) -> None:
    if ell >= 1 and ell >= (p - 2) / 2:
        warnings.warn(
            f"BR order ell={ell} >= (p-2)/2 with p={p}: bias expression is not valid",
            MomentWindowWarning,
            stacklevel=3,
        )
    elif ell >= 1 and ell >= (p - 2) / 4:
        warnings.warn(
            f"BR order ell={ell} >= (p-2)/4 with p={p}: MSE is infinite",
            MomentWindowWarning,
            stacklevel=3,
        )


# -- phi functions -----------------------------------------------------------


@dataclass(frozen=True)
class PhiPolySpec:
    """``phi(t) = sum_j c_j t^-j`` over ``(degree, coefficient)`` pairs."""

    coeffs: tuple[tuple[int, float], ...]

    def __post_init__(self):
        degrees = [d for d, _ in self.coeffs]
        if len(set(degrees)) != len(degrees) or any(d < 1 for d in degrees):
            raise ValueError(f"degrees must be distinct and >= 1, got {degrees}")
        object.__setattr__(self, "coeffs", tuple(sorted((int(d), float(c)) for d, c in self.coeffs)))

    @classmethod
    def br(cls, p: int, m: int, ell: int, scale: float = 1.0) -> "PhiPolySpec":
        return cls(tuple((j, scale * c) for j, c in enumerate(br_coefficients(p, m, ell), start=1)))

    @classmethod
    def stefanski(cls, p: int, m: int, ell: int) -> "PhiPolySpec":
        return cls(tuple((j, (p / m) ** j) for j in range(1, ell + 1)))

    @property
    def degree(self) -> int:
        return max((d for d, _ in self.coeffs), default=0)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", over="ignore"):
            inv = 1.0 / t
            out = np.zeros_like(t)
            for d, c in self.coeffs:
                out = out + c * inv**d
        return out if out.ndim else float(out)


def mm_correction(p: int, m: int) -> Callable:
    """The phi of the method-of-moments estimator, ``c / (t - c)`` with ``c = p/m``."""
    c = p / m

    def phi(t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = c / (t - c)
        return out if out.ndim else float(out)

    return phi


def phi_star_function(p: int, m: int, phi_bar: Callable, ell: int) -> Callable:
    """``max[0, min{phi_bar(t), sum_j (a_j/b_j) t^-j}]``."""
    cap = PhiPolySpec.br(p, m, ell)

    def phi(t):
        out = np.maximum(0.0, np.minimum(phi_bar(t), cap(t)))
        return out if np.ndim(out) else float(out)

    # kinks, jumps and poles, located in v = t/(1+t) so the search covers (0, inf)
    to_t = lambda v: v / (1.0 - v)  # noqa: E731
    pts = _sign_changes(lambda v: phi_bar(to_t(v)) - cap(to_t(v)), 4001)
    pts += _sign_changes(lambda v: np.minimum(phi_bar(to_t(v)), cap(to_t(v))), 4001)
    phi.breakpoints_t = sorted(set(to_t(v) for v in pts))
    return phi


def phi_star_star_function(p: int, m: int, ell: int) -> Callable:
    """Full BR sum for ``t > 1``, first-order term otherwise."""
    full = PhiPolySpec.br(p, m, ell)
    first = PhiPolySpec.br(p, m, 1)

    def phi(t):
        t = np.asarray(t, dtype=float)
        out = np.where(t > 1.0, full(t), first(t))
        return out if out.ndim else float(out)

    phi.breakpoints_t = [1.0]
    return phi


# -- psi functions -----------------------------------------------------------


_PSI_KINDS = {"identity", "tls", "br", "tbr", "gg", "tgg", "kr", "psi0", "psi1", "custom"}


@dataclass(frozen=True)
class PsiSpec:
    """A multiplier ``psi(v)`` on ``(0, 1)`` applied as ``psi(V) * LS``.

    ``kr``, ``psi0`` and ``psi1`` wrap a base ``psi_bar``; ``tls``, ``tbr`` and
    ``tgg`` are the named truncations ``psi0(1)``, ``psi1(BR_ell)`` and
    ``psi1(GG)``.  ``evaluate`` needs ``(p, m)`` because the truncation
    thresholds depend on them.
    """

    kind: str
    ell: int = 0
    base: "PsiSpec | None" = None
    func: Callable | None = field(default=None, compare=False)
    label: str = ""

    def __post_init__(self):
        if self.kind not in _PSI_KINDS:
            raise ValueError(f"unknown psi kind {self.kind!r}")
        if self.kind in {"kr", "psi0", "psi1"} and self.base is None:
            raise ValueError(f"psi kind {self.kind!r} needs a base")

    # constructors
    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def tls(cls):
        return cls("tls")

    @classmethod
    def br(cls, ell: int):
        return cls("br", ell=ell)

    @classmethod
    def tbr(cls, ell: int):
        return cls("tbr", ell=ell)

    @classmethod
    def gg(cls):
        return cls("gg")

    @classmethod
    def tgg(cls):
        return cls("tgg")

    @classmethod
    def kr(cls, base: "PsiSpec | None" = None):
        return cls("kr", base=base or cls.identity())

    @classmethod
    def psi0(cls, base: "PsiSpec"):
        return cls("psi0", base=base)

    @classmethod
    def psi1(cls, base: "PsiSpec"):
        return cls("psi1", base=base)

    @classmethod
    def custom(cls, func: Callable, label: str = "custom"):
        return cls("custom", func=func, label=label)

    @property
    def name(self) -> str:
        if self.kind == "custom":
            return self.label
        if self.kind in {"br", "tbr"}:
            return f"{self.kind}{self.ell}"
        if self.base is not None:
            return f"{self.kind}({self.base.name})"
        return self.kind

    def _expanded(self) -> "PsiSpec":
        if self.kind == "tls":
            return PsiSpec.psi0(PsiSpec.identity())
        if self.kind == "tbr":
            return PsiSpec.psi1(PsiSpec.br(self.ell))
        if self.kind == "tgg":
            return PsiSpec.psi1(PsiSpec.gg())
        return self

    def evaluate(self, v, p: int, m: int):
        v = np.asarray(v, dtype=float)
        spec = self._expanded()
        kind = spec.kind
        c = p + m - 2
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            if kind == "identity":
                out = np.ones_like(v)
            elif kind == "custom":
                out = np.broadcast_to(np.asarray(spec.func(v), dtype=float), v.shape).copy()
            elif kind == "br":
                ratio = (1.0 - v) / v
                out = np.ones_like(v)
                for j, cj in enumerate(br_coefficients(p, m, spec.ell), start=1):
                    out = out + cj * ratio**j
            elif kind == "gg":
                g = np.minimum((p - 2) / p, (p - 2) / (m + 2) * (1.0 - v) / v)
                out = 1.0 / (1.0 - g)
            else:
                base = spec.base.evaluate(v, p, m)
                if kind == "kr":
                    out = np.minimum(base, c * v)
                else:
                    floor = 0.0 if kind == "psi0" else 1.0
                    out = np.maximum(floor, np.minimum(base, 2 * c * v - base))
        return out if out.ndim else float(out)

    def breakpoints(self, p: int, m: int, grid_size: int = 4001) -> list[float]:
        """Points in ``(0, 1)`` where ``psi`` switches branch (kinks)."""
        spec = self._expanded()
        kind = spec.kind
        c = p + m - 2
        if kind in {"identity", "br", "custom"}:
            return []
        if kind == "gg":
            return [p / (p + m + 2)]
        base = spec.base
        pts = list(base.breakpoints(p, m, grid_size))
        bfun = lambda v: base.evaluate(v, p, m)  # noqa: E731
        if kind == "kr":
            pts += _sign_changes(lambda v: bfun(v) - c * v, grid_size)
        else:
            floor = 0.0 if kind == "psi0" else 1.0
            pts += _sign_changes(lambda v: bfun(v) - c * v, grid_size)
            pts += _sign_changes(lambda v: np.minimum(bfun(v), 2 * c * v - bfun(v)) - floor, grid_size)
        return sorted(set(round(x, 15) for x in pts if 0.0 < x < 1.0))

    def __call__(self, v, p: int, m: int):
        return self.evaluate(v, p, m)


def _sign_changes(f: Callable, grid_size: int) -> list[float]:
    # log-spaced near 0 and 1 as well as linear in between
    lin = np.linspace(0.0, 1.0, grid_size)[1:-1]
    edge = np.logspace(-12, -1, 200)
    grid = np.unique(np.concatenate([lin, edge, 1.0 - edge]))
    with np.errstate(all="ignore"):
        vals = np.asarray(f(grid), dtype=float)
    roots = []
    ok = np.isfinite(vals)
    for i in np.nonzero(ok[:-1] & ok[1:] & (np.sign(vals[:-1]) != np.sign(vals[1:])))[0]:
        a, b = grid[i], grid[i + 1]
        if vals[i] == 0.0:
            roots.append(a)
            continue
        roots.append(brentq(lambda x: float(f(np.array([x]))[0]), a, b, xtol=1e-15, rtol=1e-15))
    return roots


# -- slope estimators --------------------------------------------------------


def ls(st: SufficientStats):
    return _finish(np.asarray(st.t_uz) / st.u_sq, "LS")


def _phi_apply(st, phi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.asarray(st.u_sq, dtype=float) / st.s
    return (1.0 + np.asarray(phi(t))) * (np.asarray(st.t_uz) / st.u_sq)


def mm(st: SufficientStats):
    _need_replicates(st, "MM")
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = np.asarray(st.u_sq) / st.p - np.asarray(st.s) / st.m
        out = (np.asarray(st.t_uz) / st.p) / denom
    return _finish(np.where(denom == 0.0, np.nan, out), "MM")


def stefanski(st: SufficientStats, ell: int):
    _need_replicates(st, "Stefanski")
    x = (st.p / st.m) * np.asarray(st.s) / st.u_sq
    factor = sum(x**j for j in range(0, ell + 1))
    return _finish(factor * ls(st), f"ST{ell}")


def br(st: SufficientStats, ell: int):
    if ell == 0:
        return ls(st)
    _need_replicates(st, "BR")
    check_br_window(st.p, ell)
    return _finish(_phi_apply(st, PhiPolySpec.br(st.p, st.m, ell)), f"BR{ell}")


def br_doubled(st: SufficientStats, ell: int):
    if ell == 0:
        return ls(st)
    _need_replicates(st, "BR doubled")
    check_br_window(st.p, ell)
    return _finish(_phi_apply(st, PhiPolySpec.br(st.p, st.m, ell, scale=2.0)), f"BRD{ell}")


def phi_star(st: SufficientStats, phi_bar: Callable, ell: int):
    _need_replicates(st, "phi*")
    return _finish(_phi_apply(st, phi_star_function(st.p, st.m, phi_bar, ell)), f"PHISTAR{ell}")


def phi_star_star(st: SufficientStats, ell: int):
    _need_replicates(st, "phi**")
    return _finish(_phi_apply(st, phi_star_star_function(st.p, st.m, ell)), f"PHISS{ell}")


def psi_apply(st: SufficientStats, psi: PsiSpec):
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.asarray(st.u_sq, dtype=float) / (np.asarray(st.s) + st.u_sq)
    return _finish(psi.evaluate(v, st.p, st.m) * (np.asarray(st.t_uz) / st.u_sq), psi.name)


def tls(st: SufficientStats):
    return psi_apply(st, PsiSpec.tls())


def tls2(st: SufficientStats):
    return psi_apply(st, PsiSpec.kr())


def tbr(st: SufficientStats, ell: int):
    _need_replicates(st, "TBR")
    if ell >= (st.p - 2) / 4:
        warnings.warn(f"TBR order ell={ell} >= (p-2)/4 with p={st.p}", MomentWindowWarning, stacklevel=2)
    return psi_apply(st, PsiSpec.tbr(ell))


def gg_shrinkage(st: SufficientStats):
    """``G^K = min{(p-2)/p, G^JS}`` with ``G^JS = (p-2)S / ((m+2)||U||^2)``."""
    g_js = (st.p - 2) * np.asarray(st.s) / ((st.m + 2) * np.asarray(st.u_sq))
    return np.minimum((st.p - 2) / st.p, g_js)


def gg(st: SufficientStats):
    if st.p < 3:
        raise ValueError("GG needs p >= 3")
    return _finish(ls(st) / (1.0 - gg_shrinkage(st)), "GG")


def tgg(st: SufficientStats):
    if st.p < 3:
        raise ValueError("TGG needs p >= 3")
    return psi_apply(st, PsiSpec.tgg())


def whittemore(st: SufficientStats):
    """Plug-in of the untruncated James-Stein mean; no finite moments."""
    g_js = (st.p - 2) * np.asarray(st.s) / ((st.m + 2) * np.asarray(st.u_sq))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (np.asarray(st.t_uz) / st.u_sq) / (1.0 - g_js)
    return _finish(np.where(g_js == 1.0, np.nan, out), "W")


def ml(st: SufficientStats):
    """Orthogonal-regression ML slope, assuming ``tau^2 = sigma_x^2``."""
    t, z_sq, u_sq, r = np.asarray(st.t_uz, dtype=float), st.z_sq, st.u_sq, st.r
    d = z_sq - r * u_sq
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.sqrt(d * d + 4 * r * t * t)
        # (d + root) / (2t) rewritten as 2rt / (root - d) when d < 0 to avoid cancellation
        out = np.where(d >= 0, (d + root) / (2 * t), (2 * r * t) / (root - d))
    return _finish(np.where(t == 0.0, np.nan, out), "ML")


def ir(st: SufficientStats):
    t = np.asarray(st.t_uz, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = st.z_sq / t
    return _finish(np.where(t == 0.0, np.nan, out), "IR")


# -- Bayes -------------------------------------------------------------------


@dataclass(frozen=True)
class BayesHyperparams:
    c1: float = 1.0
    c2: float = 1.0

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError("c1 and c2 must be positive")

    @property
    def _den(self):
        return 1.0 + self.c1 + self.c2

    @property
    def d1(self):
        return self.c1 / self._den

    @property
    def d2(self):
        return (self.c1 + self.c2) / self._den

    @property
    def d1_star(self):
        return (1.0 + self.c2) / self._den

    @property
    def d2_star(self):
        return 1.0 / self._den


def bayes_pb(st: SufficientStats, h: BayesHyperparams = BayesHyperparams()):
    num = np.asarray(st.t_uz) + h.d1 * np.asarray(st.u0) * st.z0
    den = np.asarray(st.u_sq) + st.s + h.d2 * np.asarray(st.u0) ** 2
    return _finish(num / den, "PB")


def bayes_pm_intercept(st: SufficientStats, h: BayesHyperparams = BayesHyperparams()):
    return _finish(h.d1_star * np.asarray(st.z0) - h.d2_star * bayes_pb(st, h) * st.u0, "PM")


def intercept_of(st: SufficientStats, slope):
    return st.z0 - slope * st.u0


# -- known error variance (sigma^2 = 1 units) ---------------------------------


def br_known_variance(st: SufficientStats, ell: int):
    w = np.asarray(st.u_sq, dtype=float)
    factor = 1.0 + sum(br_a(st.p, j) / w**j for j in range(1, ell + 1))
    return _finish(factor * (np.asarray(st.t_uz) / w), f"BRKV{ell}")


def psi0_known_variance_function(psi_bar: Callable) -> Callable:
    def psi0(w):
        w = np.asarray(w, dtype=float)
        base = np.asarray(psi_bar(w), dtype=float)
        out = np.maximum(0.0, np.minimum(base, 2 * w - base))
        return out if out.ndim else float(out)

    return psi0


def psi0_known_variance(st: SufficientStats, psi_bar: Callable):
    w = np.asarray(st.u_sq, dtype=float)
    return _finish(psi0_known_variance_function(psi_bar)(w) * (np.asarray(st.t_uz) / w), "PSI0KV")


# -- registry ----------------------------------------------------------------


@dataclass(frozen=True)
class EstimateResult:
    slope: float
    intercept: float | None
    estimator_id: str
    finite_moment_note: str


@dataclass(frozen=True)
class EstimatorDef:
    estimator_id: str
    fn: Callable[[SufficientStats], object]
    note: str


_FIXED = {
    "LS": (ls, MOMENTS_EXIST),
    "MM": (mm, NO_FINITE_MOMENTS),
    "TLS": (tls, MOMENTS_EXIST),
    "TLS2": (tls2, MOMENTS_EXIST),
    "GG": (gg, MOMENTS_EXIST),
    "TGG": (tgg, MOMENTS_EXIST),
    "W": (whittemore, NO_FINITE_MOMENTS),
    "ML": (ml, NO_FINITE_MOMENTS),
    "IR": (ir, NO_FINITE_MOMENTS),
    "PB": (bayes_pb, MOMENTS_EXIST),
}

_ORDERED = {
    "ST": stefanski,
    "BR": br,
    "BRD": br_doubled,
    "TBR": tbr,
    "PHISS": phi_star_star,
}

_ID_RE = re.compile(r"^([A-Z]+?)_?(\d+)$")


def _phistar_mm(st, ell):
    return phi_star(st, mm_correction(st.p, st.m), ell)


class UnknownEstimatorError(KeyError):
    pass


def resolve(estimator_id: str) -> EstimatorDef:
    """Look up an estimator by id, e.g. ``LS``, ``BR1``, ``TBR5``, ``PHISTAR2``.

    ``PHISTAR<l>`` uses the method-of-moments correction as ``phi_bar``.
    """
    key = estimator_id.strip().upper()
    if key in _FIXED:
        fn, note = _FIXED[key]
        return EstimatorDef(key, fn, note)
    match = _ID_RE.match(key)
    if match:
        family, ell = match.group(1), int(match.group(2))
        if family == "PHISTAR":
            return EstimatorDef(key, lambda st, _l=ell: _phistar_mm(st, _l), MOMENTS_EXIST)
        if family in _ORDERED:
            fn = _ORDERED[family]
            return EstimatorDef(f"{family}{ell}", lambda st, _f=fn, _l=ell: _f(st, _l), MOMENTS_EXIST)
    raise UnknownEstimatorError(estimator_id)


def estimate(st: SufficientStats, estimator_id: str) -> EstimateResult:
    spec = resolve(estimator_id)
    slope = spec.fn(st)
    return EstimateResult(
        slope=slope,
        intercept=intercept_of(st, slope),
        estimator_id=spec.estimator_id,
        finite_moment_note=spec.note,
    )

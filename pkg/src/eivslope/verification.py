"""Named numerical verification suites behind ``eivslope verify``."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import estimators as est
from . import moments as mo
from .canonical import RepeatedMeasuresSample, SufficientStats, canonicalize, helmert_q, sufficient_stats
from .estimators import PhiPolySpec, PsiSpec


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


DOMINATION_GRID = [(p, m) for p in (3, 5, 9, 29, 99) for m in (1, 4, 10, 30, 100)]


def domination_pairs(p: int) -> list[tuple[PsiSpec, PsiSpec]]:
    pairs = [
        (PsiSpec.tls(), PsiSpec.identity()),
        (PsiSpec.tgg(), PsiSpec.gg()),
        (PsiSpec.kr(), PsiSpec.identity()),
        (PsiSpec.kr(PsiSpec.gg()), PsiSpec.gg()),
    ]
    for ell in (1, 2, 3, 5):
        if ell >= (p - 2) / 2:
            # BR coefficients turn negative outside this window
            continue
        pairs.append((PsiSpec.tbr(ell), PsiSpec.br(ell)))
        pairs.append((PsiSpec.kr(PsiSpec.br(ell)), PsiSpec.br(ell)))
    return pairs


def suite_domination(inject_bad: bool = False) -> list[Check]:
    out = []
    for p, m in DOMINATION_GRID:
        for psi, psi_bar in domination_pairs(p):
            r = mo.verify_domination(psi, psi_bar, p, m)
            out.append(
                Check(
                    "domination",
                    f"{psi.name} vs {psi_bar.name} p={p} m={m}",
                    r.passed,
                    f"max(psi^2-bar^2)={r.max_square_excess:.3g} max(Delta)={r.max_delta:.3g}",
                )
            )
    kv_psi0 = est.psi0_known_variance_function(lambda w: np.ones_like(np.asarray(w, dtype=float)))
    r0 = mo.verify_domination_known_variance(kv_psi0, lambda w: 1.0)
    out.append(Check("domination", "known-variance psi0 vs 1 on (0, 50]", r0.passed, f"max(Delta0)={r0.max_delta0:.3g}"))
    if inject_bad:
        bad = PsiSpec.custom(lambda v: np.full_like(np.asarray(v, dtype=float), 1.5), label="const1.5")
        r = mo.verify_domination(bad, PsiSpec.identity(), 9, 10)
        out.append(Check("domination", "injected const1.5 vs 1 p=9 m=10", r.passed, f"max(psi^2-bar^2)={r.max_square_excess:.3g}"))
    return out


def suite_hudson() -> list[Check]:
    """``lam E[g(K)] = E[K g(K-1)]`` for several ``g``."""
    out = []
    p = 10
    fams: dict[str, Callable] = {
        "1/(p+2k)": lambda k: 1.0 / (p + 2.0 * k),
        "(p-2)/(p+2k-2)": lambda k: (p - 2.0) / (p + 2.0 * k - 2),
        "prod2": lambda k: (p - 2.0) * (p - 4.0) / ((p + 2.0 * k - 2) * (p + 2.0 * k - 4)),
        "exp(-k/7)": lambda k: np.exp(-np.asarray(k, dtype=float) / 7.0),
    }
    for lam in (0.1, 0.5, 1.0, 5.0, 10.0, 50.0, 100.0):
        for name, g in fams.items():
            lhs = lam * mo.poisson_expectation(g, lam)
            rhs = mo.poisson_expectation(lambda k, g=g: np.asarray(k) * g(np.maximum(np.asarray(k) - 1, 0)), lam)
            err = abs(lhs - rhs)
            out.append(Check("hudson", f"g={name} lam={lam:g}", err <= 1e-10, f"|diff|={err:.2e}"))
    return out


def suite_identities() -> list[Check]:
    out = []
    for p, m, k in ((10, 11, 0), (10, 11, 3), (29, 30, 5), (99, 100, 40)):
        mp = mo.MixtureParams(p, m, 1.0)
        for ell in (1, 2, 3):
            if p + 2 * k <= 2 * (ell + 1):
                continue
            phi = PhiPolySpec.br(p, m, ell)
            c = mo.lemma1_integrals(mp, phi, k, method="closed")
            q = mo.lemma1_integrals(mp, phi, k, method="quad")
            err = max(abs(c[0] - q[0]), abs(c[1] - q[1]))
            out.append(Check("identities", f"Lemma1 closed vs quad BR{ell} p={p} m={m} k={k}", err <= 1e-8, f"|diff|={err:.2e}"))
    one = PsiSpec.identity()
    for p, m, lam in ((9, 10, 0.045), (9, 10, 2.25), (29, 30, 7.25), (99, 100, 24.75)):
        mp = mo.MixtureParams(p, m, lam)
        ids = mo.moment_identities(mp)
        assembled = ids.e2 - 2 * ids.e1
        ce = mo.control_excess(one, mp)
        err = abs(ce - assembled)
        out.append(Check("identities", f"control excess psi=1 vs e1/e2 p={p} lam={lam:g}", err <= 1e-8, f"|diff|={err:.2e}"))
        a = mo.mse_psi_exact(one, mp, -5.0, 10.0, 1.0)
        b = mo.mse_ls_exact(mp, -5.0, 10.0, 1.0)
        out.append(Check("identities", f"MSE psi=1 vs LS p={p} lam={lam:g}", abs(a - b) <= 1e-8 * max(1, b), f"|diff|={abs(a - b):.2e}"))
    for ell in (1, 2):
        mp = mo.MixtureParams(10, 11, 5.0)
        kv = mo.known_variance_moments(mo.br_known_variance_multiplier(10, ell), 10, 5.0, 1.0, second_moment=False)
        ref = mo.bias_br_exact(mp, ell, 1.0)
        out.append(Check("identities", f"known-variance BR{ell} bias vs product form", abs(kv.bias - ref) <= 1e-8, f"|diff|={abs(kv.bias - ref):.2e}"))
    return out


def suite_bias() -> list[Check]:
    out = []
    for p in (10, 30, 100):
        for lam in (0.045, 2.25, 72.5):
            mp = mo.MixtureParams(p, p + 1, lam)
            top = min(int(math.ceil((p - 2) / 2)) - 1, 10)
            vals = [abs(mo.bias_br_exact(mp, ell, 1.0)) for ell in range(0, top + 1)]
            mono = all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
            out.append(Check("bias", f"|bias BR_l| nonincreasing l=0..{top} p={p} lam={lam:g}", mono, f"{vals[0]:.4g}->{vals[-1]:.4g}"))
    p, m = 10, 11
    for lam in (0.5, 5.0):
        mp = mo.MixtureParams(p, m, lam)
        cases = [
            ("BR1", PhiPolySpec.br(p, m, 1), 1),
            ("phi*1", est.phi_star_function(p, m, est.mm_correction(p, m), 1), 1),
            ("phi**1", est.phi_star_star_function(p, m, 1), 1),
            ("phi**2", est.phi_star_star_function(p, m, 2), 2),
        ]
        for ell in (1, 2, 3):
            if est.stefanski_condition(p, m, ell):
                cases.append((f"ST{ell}", PhiPolySpec.stefanski(p, m, ell), ell))
        for name, phi, ell in cases:
            r = mo.bias_theorem1_verify(phi, mp, ell)
            out.append(
                Check("bias", f"Theorem-1 envelope and bias {name} p={p} m={m} lam={lam:g}", r.passed, f"bias={r.bias_phi:.6g} ls={r.bias_ls:.6g}")
            )
    bad = mo.bias_theorem1_verify(PhiPolySpec(((1, 1e6),)), mo.MixtureParams(p, m, 5.0), 1)
    out.append(Check("bias", "oversized phi flagged by envelope", not bad.envelope_ok, f"max violation={bad.max_envelope_violation:.3g}"))
    return out


def suite_canonical(n_samples: int = 1000, seed: int = 20240101) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst_orth = worst_norm = worst_ls = 0.0
    for _ in range(n_samples):
        n = int(rng.integers(4, 40))
        r = int(rng.integers(1, 5))
        sample = RepeatedMeasuresSample(y=rng.normal(size=n) * 3, x=rng.normal(size=(n, r)) * 2 + rng.normal(size=(n, 1)))
        q = helmert_q(n)
        worst_orth = max(worst_orth, float(np.max(np.abs(q @ q.T - np.eye(n)))))
        cs = canonicalize(sample)
        y_norm = float(sample.y @ sample.y)
        z_norm = cs.z0**2 + float(cs.z @ cs.z)
        worst_norm = max(worst_norm, abs(y_norm - z_norm) / max(1.0, y_norm))
        st = sufficient_stats(cs)
        xb = sample.x.mean(axis=1)
        xc, yc = xb - xb.mean(), sample.y - sample.y.mean()
        ols = float(xc @ yc / (xc @ xc))
        worst_ls = max(worst_ls, abs(est.ls(st) - ols) / max(1.0, abs(ols)))
    return [
        Check("canonical", f"Q Q' = I ({n_samples} samples)", worst_orth <= 1e-12, f"max={worst_orth:.2e}"),
        Check("canonical", f"norm preserved ({n_samples} samples)", worst_norm <= 1e-12, f"max rel={worst_norm:.2e}"),
        Check("canonical", f"LS equals centred OLS ({n_samples} samples)", worst_ls <= 1e-10, f"max rel={worst_ls:.2e}"),
    ]


def ordering_draws(n_draws: int = 10_000, seed: int = 7) -> SufficientStats:
    rng = np.random.default_rng(seed)
    p = rng.integers(3, 60, n_draws)
    pmax = int(p.max())
    mask = np.arange(pmax)[None, :] < p[:, None]
    u = rng.normal(size=(n_draws, pmax)) * rng.uniform(0.1, 5, (n_draws, 1)) + rng.normal(size=(n_draws, 1))
    z = rng.normal(size=(n_draws, pmax)) * rng.uniform(0.1, 5, (n_draws, 1)) + rng.normal(size=(n_draws, 1)) * u
    u, z = u * mask, z * mask
    r = rng.integers(2, 5, n_draws)
    return SufficientStats(
        t_uz=np.einsum("ij,ij->i", u, z),
        u_sq=np.einsum("ij,ij->i", u, u),
        z_sq=np.einsum("ij,ij->i", z, z),
        u0=np.zeros(n_draws),
        z0=np.zeros(n_draws),
        s=rng.uniform(0.1, 10, n_draws),
        p=10,
        m=10,
        r=r,
    )


def suite_ordering(n_draws: int = 10_000, seed: int = 7) -> list[Check]:
    st = ordering_draws(n_draws, seed)
    ls, ml, ir = est.ls(st), est.ml(st), est.ir(st)
    pos = st.t_uz > 0
    neg = st.t_uz < 0
    ok_pos = bool(np.all((0 < ls[pos]) & (ls[pos] < ml[pos]) & (ml[pos] < ir[pos])))
    ok_neg = bool(np.all((0 > ls[neg]) & (ls[neg] > ml[neg]) & (ml[neg] > ir[neg])))
    return [
        Check("ordering", f"0 < LS < ML < IR when U'Z > 0 ({int(pos.sum())} draws)", ok_pos),
        Check("ordering", f"0 > LS > ML > IR when U'Z < 0 ({int(neg.sum())} draws)", ok_neg),
    ]


SUITES: dict[str, Callable[[], list[Check]]] = {
    "domination": suite_domination,
    "hudson": suite_hudson,
    "identities": suite_identities,
    "bias": suite_bias,
    "canonical": suite_canonical,
    "ordering": suite_ordering,
}


def run_suite(name: str, inject_bad: bool = False) -> list[Check]:
    if name == "all":
        out = []
        for key, fn in SUITES.items():
            out += suite_domination(inject_bad) if key == "domination" else fn()
        return out
    if name not in SUITES:
        raise KeyError(name)
    if name == "domination":
        return suite_domination(inject_bad)
    if inject_bad:
        return SUITES[name]() + suite_domination(True)[-1:]
    return SUITES[name]()

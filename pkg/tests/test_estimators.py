import math
import warnings
from fractions import Fraction

import numpy as np
import pytest

from eivslope import estimators as E
from eivslope.canonical import SufficientStats
from eivslope.estimators import BayesHyperparams, PhiPolySpec, PsiSpec

# n=11 worked example: p=10, m=11, S=1421.5, ||U||^2=706.41, LS=0.23972
P2, M2, S2, U2, LS2 = 10, 11, 1421.5, 706.41, 0.23972


def stats(t_uz, u_sq, z_sq=None, s=0.0, p=10, m=11, r=2, u0=0.0, z0=0.0):
    if z_sq is None:
        z_sq = t_uz**2 / u_sq * 1.5
    return SufficientStats(t_uz=t_uz, u_sq=u_sq, z_sq=z_sq, u0=u0, z0=z0, s=s, p=p, m=m, r=r)


def table2():
    return stats(LS2 * U2, U2, s=S2, p=P2, m=M2)


def random_stats(rng, size, p=10, m=11, r=2):
    u = rng.normal(size=(size, p)) + rng.normal(size=(size, 1))
    z = rng.normal(size=(size, p)) * 2 + 1.5 * u
    s = rng.chisquare(m, size) * rng.uniform(0.1, 3, size)
    return SufficientStats.from_arrays(u, z, s, u0=rng.normal(size=size), z0=rng.normal(size=size), m=m, r=r)


def test_br_coefficients_values():
    assert E.br_a(10, 3) == 8 * 6 * 4
    assert E.br_b(11, 3) == 11 * 13 * 15
    assert E.br_ratio(10, 11, 2) == Fraction(48, 143)


def test_ls_table2():
    assert E.ls(stats(169.344, 706.41)) == pytest.approx(0.23972, abs=5e-6)


def test_ls_trivial():
    assert E.ls(stats(4.0, 4.0)) == 1.0
    assert E.ls(stats(0.0, 4.0, z_sq=1.0)) == 0.0


def test_mm_table2():
    assert E.mm(table2()) == pytest.approx(-0.28904, abs=5e-5)


def test_mm_identity_and_s0():
    st = table2()
    assert E.mm(st) == pytest.approx(E.ls(st) / (1 - (P2 / M2) * S2 / U2), rel=1e-12)
    st0 = stats(3.0, 2.0, s=0.0)
    assert E.mm(st0) == pytest.approx(E.ls(st0), rel=1e-15)


def test_mm_pole():
    with pytest.raises(E.SingularEstimateError):
        E.mm(stats(3.0, 10.0, s=11.0, p=10, m=11))


def test_mm_array_pole_is_nan():
    st = SufficientStats(
        t_uz=np.array([3.0, 3.0]), u_sq=np.array([10.0, 20.0]), z_sq=np.array([5.0, 5.0]),
        u0=0.0, z0=0.0, s=np.array([11.0, 11.0]), p=10, m=11, r=2,
    )
    out = E.mm(st)
    assert np.isnan(out[0]) and np.isfinite(out[1])


def test_stefanski_table2():
    assert E.stefanski(table2(), 1) == pytest.approx(0.23972 * (1 + (10 / 11) * S2 / U2), rel=1e-12)
    assert E.stefanski(table2(), 1) == pytest.approx(0.678252, abs=1e-6)


def test_stefanski_s0_and_geometric_limit():
    assert E.stefanski(stats(2.0, 4.0, s=0.0), 3) == 0.5
    st = stats(2.0, 40.0, s=10.0)
    assert E.stefanski(st, 60) == pytest.approx(E.mm(st), rel=1e-10)


def test_br1_table2():
    assert E.br(table2(), 1) == pytest.approx(0.59055, abs=5e-5)


def test_br0_is_ls():
    st = table2()
    assert E.br(st, 0) == E.ls(st)


def test_br_table1_chain():
    s_ratio = (25 / 24) * (1 - 0.47693 / 0.53151)
    st = stats(0.47693 * 1000, 1000.0, s=s_ratio * 1000, p=24, m=25)
    assert E.br(st, 1) == pytest.approx(0.52183, abs=1e-4)


def test_br_warns_outside_windows():
    with pytest.warns(E.MomentWindowWarning, match="MSE is infinite"):
        E.br(table2(), 2)
    with pytest.warns(E.MomentWindowWarning, match="bias expression"):
        E.br(table2(), 4)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        E.br(table2(), 1)


def test_br_doubled():
    st = table2()
    assert E.br_doubled(st, 1) == pytest.approx(0.23972 * (1 + 2 * (8 / 11) * S2 / U2), rel=1e-12)
    assert E.br_doubled(st, 1) == pytest.approx(0.941372, abs=1e-6)
    assert E.br_doubled(st, 1) - E.ls(st) == pytest.approx(2 * (E.br(st, 1) - E.ls(st)), rel=1e-14)
    assert E.br_doubled(stats(1.0, 2.0, s=0.0), 1) == 0.5


def test_phi_star_limits():
    st = stats(3.0, 20.0, s=5.0, p=10, m=11)
    zero = lambda t: np.zeros_like(np.asarray(t, dtype=float))  # noqa: E731
    huge = lambda t: np.full_like(np.asarray(t, dtype=float), 1e9)  # noqa: E731
    assert E.phi_star(st, zero, 1) == pytest.approx(E.ls(st))
    with pytest.warns(E.MomentWindowWarning):
        assert E.phi_star(st, huge, 2) == pytest.approx(E.br(st, 2), rel=1e-14)


def test_phi_star_mm_piecewise():
    p, m = 10, 11
    c = p / m
    phi_bar = E.mm_correction(p, m)
    for t in np.linspace(0.1, 10, 300):
        st = stats(2.0 * t, t, s=1.0, p=p, m=m)  # ||U||^2/S = t, LS = 2
        cap = (8 / 11) / t
        mm_corr = c / (t - c)
        expect = 2.0 * (1 + max(0.0, min(mm_corr, cap)))
        assert E.phi_star(st, phi_bar, 1) == pytest.approx(expect, rel=1e-12)
        if 0 <= mm_corr <= cap:
            assert E.phi_star(st, phi_bar, 1) == pytest.approx(E.mm(st), rel=1e-12)


def test_phi_star_star_branches():
    p, m = 20, 21
    st_hi = stats(2.0 * 2, 2.0, s=1.0, p=p, m=m)
    st_lo = stats(0.5 * 2, 0.5, s=1.0, p=p, m=m)
    assert E.phi_star_star(st_hi, 3) == pytest.approx(E.br(st_hi, 3), rel=1e-14)
    assert E.phi_star_star(st_lo, 3) == pytest.approx(E.br(st_lo, 1), rel=1e-14)
    f = E.phi_star_star_function(p, m, 1)
    assert f(1.0) == pytest.approx(PhiPolySpec.br(p, m, 1)(1.0))


def test_psi_identity_is_ls():
    st = table2()
    assert E.psi_apply(st, PsiSpec.identity()) == E.ls(st)


def test_tls_table2_untruncated():
    st = table2()
    v = U2 / (S2 + U2)
    assert v == pytest.approx(0.331974, abs=1e-6)
    assert 2 * 19 * v - 1 == pytest.approx(11.615, abs=1e-3)
    assert E.tls(st) == E.ls(st)


def test_kr_factor():
    # V = 0.02 -> (p+m-2) V = 0.38
    st = stats(1.0, 0.02, s=0.98, p=10, m=11)
    assert E.tls2(st) == pytest.approx(0.38 * E.ls(st), rel=1e-12)


def test_gg_cases():
    st0 = stats(3.0, 2.0, s=0.0)
    assert E.gg(st0) == E.ls(st0)
    st_cap = stats(3.0, 1.0, s=100.0, p=10, m=11)
    assert E.gg(st_cap) == pytest.approx(5 * E.ls(st_cap), rel=1e-12)


def test_tgg_bounded_by_gg():
    rng = np.random.default_rng(0)
    st = random_stats(rng, 1000)
    ratio_t = E.tgg(st) / E.ls(st)
    ratio_g = E.gg(st) / E.ls(st)
    assert np.all(ratio_t <= ratio_g * (1 + 1e-12))
    assert np.all(ratio_t >= 1 - 1e-12)


def test_tbr_bounds_and_branches():
    rng = np.random.default_rng(1)
    st = random_stats(rng, 1000, p=20, m=21)
    v = st.u_sq / (st.s + st.u_sq)
    factor = E.tbr(st, 2) / E.ls(st)
    bar = PsiSpec.br(2).evaluate(v, 20, 21)
    assert np.all(factor >= 1 - 1e-12) and np.all(factor <= bar * (1 + 1e-12))
    untrunc = 2 * 39 * v - bar >= bar
    np.testing.assert_allclose(factor[untrunc], bar[untrunc], rtol=1e-12)
    st1 = stats(2.0, 2.0, s=0.0, p=20, m=21)
    assert E.tbr(st1, 2) == E.ls(st1)


def test_tbr_warns_high_order():
    with pytest.warns(E.MomentWindowWarning):
        E.tbr(table2(), 2)


def test_psi_truncation_bounds_on_grid():
    v = np.linspace(1e-6, 1 - 1e-6, 20001)
    for p, m in [(3, 1), (10, 11), (29, 30)]:
        tls = PsiSpec.tls().evaluate(v, p, m)
        assert np.all((tls >= 0) & (tls <= 1))
        tgg = PsiSpec.tgg().evaluate(v, p, m)
        assert np.all(tgg >= 1) and np.all(tgg <= PsiSpec.gg().evaluate(v, p, m) + 1e-12)
        for base in (PsiSpec.identity(), PsiSpec.gg()):
            assert np.all(PsiSpec.kr(base).evaluate(v, p, m) <= base.evaluate(v, p, m) + 1e-12)
        if p >= 5:
            assert np.all(PsiSpec.tbr(1).evaluate(v, p, m) >= 1)


def test_phi_class_closure():
    rng = np.random.default_rng(2)
    st = random_stats(rng, 200, p=20, m=21)
    t = st.u_sq / st.s
    ls = st.t_uz / st.u_sq
    p, m = 20, 21
    np.testing.assert_allclose(E.mm(st), (1 + (p / m) / (t - p / m)) * ls, rtol=1e-9)
    np.testing.assert_allclose(E.stefanski(st, 2), (1 + (p / m) / t + (p / m) ** 2 / t**2) * ls, rtol=1e-12)
    np.testing.assert_allclose(E.br(st, 2), (1 + (18 / 21) / t + (18 * 16 / (21 * 23)) / t**2) * ls, rtol=1e-12)


def test_psi_class_closure():
    rng = np.random.default_rng(3)
    st = random_stats(rng, 200, p=20, m=21)
    v = st.u_sq / (st.u_sq + st.s)
    ls = st.t_uz / st.u_sq
    c = 39
    tls = np.maximum(0, np.minimum(1, 2 * c * v - 1))
    np.testing.assert_allclose(E.tls(st), tls * ls, rtol=1e-12)
    np.testing.assert_allclose(E.tls2(st), np.minimum(1, c * v) * ls, rtol=1e-12)
    g = np.minimum(18 / 20, 18 / 23 * (1 - v) / v)
    np.testing.assert_allclose(E.gg(st), ls / (1 - g), rtol=1e-12)


def test_ml_trivial_and_pole():
    assert E.ml(stats(4.0, 4.0, z_sq=4.0, r=1)) == pytest.approx(1.0)
    with pytest.raises(E.SingularEstimateError):
        E.ml(stats(0.0, 4.0, z_sq=4.0))


def test_ml_table_consistency():
    # both worked-example ML rows follow from LS and IR alone
    assert E.ml(stats(LS2 * U2, U2, z_sq=1.17756 * LS2 * U2, r=2)) == pytest.approx(0.26902, abs=5e-5)
    assert E.ml(stats(0.47693e3, 1e3, z_sq=0.93854 * 0.47693e3, r=2, p=24, m=25)) == pytest.approx(0.52860, abs=5e-5)


def test_ordering():
    rng = np.random.default_rng(4)
    st = random_stats(rng, 10_000)
    ls, ml, ir = E.ls(st), E.ml(st), E.ir(st)
    pos, neg = st.t_uz > 0, st.t_uz < 0
    assert np.all((0 < ls[pos]) & (ls[pos] < ml[pos]) & (ml[pos] < ir[pos]))
    assert np.all((ir[neg] < ml[neg]) & (ml[neg] < ls[neg]) & (ls[neg] < 0))


def test_ir():
    assert E.ir(stats(4.0, 4.0, z_sq=4.0)) == 1.0
    st = stats(8.0, 4.0, z_sq=16.0)
    assert E.ir(st) == 2.0 and E.ls(st) == 2.0
    with pytest.raises(E.SingularEstimateError):
        E.ir(stats(0.0, 4.0, z_sq=1.0))
    rng = np.random.default_rng(5)
    st = random_stats(rng, 1000)
    assert np.all(np.abs(E.ir(st)) >= np.abs(E.ls(st)) * (1 - 1e-12))


def test_bayes_hyperparams():
    h = BayesHyperparams()
    assert (h.d1, h.d2, h.d1_star, h.d2_star) == pytest.approx((1 / 3, 2 / 3, 2 / 3, 1 / 3))
    h = BayesHyperparams(0.7, 2.5)
    assert 0 < h.d1 < h.d2 < 1
    assert h.d2 == pytest.approx(h.d1 + 2.5 / (1 + 0.7 + 2.5))
    with pytest.raises(ValueError):
        BayesHyperparams(0.0, 1.0)


def test_bayes_pb_cases():
    st = stats(3.0, 2.0, z_sq=9.0, s=1.0, u0=0.0, z0=0.0)
    assert E.bayes_pb(st) == pytest.approx(3.0 / 3.0)
    st = stats(3.0, 2.0, z_sq=9.0, s=1.0, u0=1.5, z0=-2.0)
    h = BayesHyperparams(1e-12, 1.0)
    assert E.bayes_pb(st, h) == pytest.approx(3.0 / (3.0 + h.d2 * 2.25), rel=1e-10)
    rng = np.random.default_rng(6)
    st = random_stats(rng, 1000)
    h = BayesHyperparams()
    pb = E.bayes_pb(st, h)
    assert np.all(pb**2 <= (st.z_sq + st.z0**2) / (st.u_sq + st.s + h.d2 * st.u0**2) * (1 + 1e-12))


def test_bayes_pm_intercept():
    st = stats(3.0, 2.0, s=1.0, u0=0.0, z0=4.0)
    h = BayesHyperparams()
    assert E.bayes_pm_intercept(st, h) == pytest.approx(h.d1_star * 4.0)
    rng = np.random.default_rng(7)
    st = random_stats(rng, 500)
    pm = E.bayes_pm_intercept(st)
    assert np.all(np.isfinite(pm))
    assert np.all(np.abs(pm) <= np.abs(st.z0) + np.abs(E.bayes_pb(st) * st.u0) + 1e-12)
    h = BayesHyperparams(1e-9, 1e-9)
    st = stats(3.0, 2.0, s=1.0, u0=1.0, z0=4.0)
    assert E.bayes_pm_intercept(st, h) == pytest.approx(4.0 - E.bayes_pb(st, h) * 1.0, rel=1e-6)


def test_intercept_of():
    st = stats(3.0, 2.0, u0=2.0, z0=5.0)
    assert E.intercept_of(st, 0.0) == 5.0
    assert E.intercept_of(st, 2.5) == 0.0
    r = E.estimate(st, "LS")
    assert r.intercept == st.z0 - r.slope * st.u0


def test_table2_intercepts_back_solve():
    xbar = (109.353 - 75.031) / (0.23972 + 0.28904)
    ybar = 75.031 + 0.23972 * xbar
    assert ybar - (-0.28904) * xbar == pytest.approx(109.353, abs=1e-9)
    assert ybar - 0.59055 * xbar == pytest.approx(52.259, abs=2e-3)


def test_known_variance():
    st = stats(8.0 * 0.3, 8.0, p=10, m=0, r=1)
    assert E.br_known_variance(st, 1) == pytest.approx(2 * E.ls(st))
    one = lambda w: np.ones_like(np.asarray(w, dtype=float))  # noqa: E731
    psi0 = E.psi0_known_variance_function(one)
    assert psi0(10.0) == 1.0
    assert psi0(0.3) == 0.0


def test_stefanski_condition_nested():
    for p in range(3, 40):
        for m in range(1, 60, 3):
            for ell in range(1, 6):
                if E.stefanski_condition(p, m, ell) and 2 * ell < p:
                    assert all(E.stefanski_condition(p, m, j) for j in range(1, ell))


def test_envelope_precondition_on_grid():
    t = np.logspace(-4, 4, 4001)
    p, m = 20, 21
    env = PhiPolySpec.br(p, m, 2, scale=2.0)(t)
    for phi in (E.phi_star_function(p, m, E.mm_correction(p, m), 2), E.phi_star_star_function(p, m, 1)):
        vals = phi(t)
        assert np.all(vals >= 0)
        assert np.all(vals <= env * (1 + 1e-12))


def test_resolve_ids():
    assert E.resolve("br_3").estimator_id == "BR3"
    assert E.resolve("TBR5").estimator_id == "TBR5"
    assert E.resolve("MM").note == E.NO_FINITE_MOMENTS
    with pytest.raises(E.UnknownEstimatorError):
        E.resolve("XYZ")


def test_estimate_all_ids_on_random_stats():
    st = stats(3.0, 5.0, z_sq=4.0, s=2.0, p=20, m=21, u0=1.0, z0=2.0)
    for eid in ["LS", "MM", "TLS", "TLS2", "GG", "TGG", "W", "ML", "IR", "PB", "ST2", "BR2", "BRD1", "TBR2", "PHISS2", "PHISTAR2"]:
        r = E.estimate(st, eid)
        assert math.isfinite(r.slope)

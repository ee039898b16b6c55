import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slutsky_forge.errors import ConfigurationError
from slutsky_forge.identification import (energy_distance, estimate_average_slutsky, estimate_functionals,
                                          ks_threshold, marginal_distance, nonid_demo, sample_distance)
from slutsky_forge.rotation import RotationCorrection, SlutskyTarget


def _close(value, target, se, floor=1e-2):
    return np.all(np.abs(np.asarray(value) - target) <= np.maximum(4 * np.asarray(se), floor))


def test_functionals_cd0_reference(cd0):
    T = estimate_functionals(cd0, (1, 1, 1), 20000)
    assert _close(T.T[0, 1], 0.18, T.T_se[0, 1]) and _close(T.T[0, 0], -0.413333, T.T_se[0, 0])
    assert T.schemes == ["forward"] * 3
    o = estimate_functionals(cd0, (1, 1, 1), method="oracle")
    assert o.T[0, 1] == pytest.approx(0.18, rel=1e-14) and o.T[0, 0] == pytest.approx(-0.4133333333, rel=1e-9)


def test_functionals_cd0_interior(cd0):
    o = estimate_functionals(cd0, (1.5, 1.2, 1.4), method="oracle")
    assert o.T[0, 1] == pytest.approx(0.14, rel=1e-13)
    mc = estimate_functionals(cd0, (1.5, 1.2, 1.4), 20000)
    assert _close(mc.T, o.T, mc.T_se)


@pytest.mark.parametrize("x", [(1.1, 1.1, 1.15), (1.0, 1.2, 1.0)])
def test_functionals_tilt(tilt, x):
    mc = estimate_functionals(tilt, x, 20000)
    o = estimate_functionals(tilt, x, method="oracle")
    assert _close(mc.T, o.T, mc.T_se, 0.0)
    assert _close(mc.m, o.m, mc.m_se, 0.0)


@settings(max_examples=8, deadline=None)
@given(st.tuples(*[st.floats(0, 1)] * 3), st.integers(0, 1000), st.sampled_from(["cd0", "tilt"]))
def test_functionals_shape_invariants(u, seed, name):
    from slutsky_forge.families import make_family

    fam = make_family(name)
    x = fam.domain.lo + (fam.domain.hi - fam.domain.lo) * np.asarray(u)
    F = estimate_functionals(fam, x, 2000, seed=seed)
    np.testing.assert_array_equal(F.T, F.T.T)
    np.testing.assert_array_equal(F.M, F.M.T)
    assert np.linalg.eigvalsh(F.M).min() >= -1e-15


def test_functionals_preconditions(cd0):
    with pytest.raises(ConfigurationError):
        estimate_functionals(cd0, (1, 1, 1), 500)
    with pytest.raises(ConfigurationError):
        estimate_functionals(cd0, (1, 1, 1), method="guess")


def test_slutsky_cd0_uncorrected(cd0, cd0_flow):
    S = estimate_average_slutsky(cd0_flow, cd0, (1, 1, 1), 50000)
    assert abs(S.S[0, 1] - 0.09) <= 4 * S.se[0, 1]
    assert abs(S.S[0, 0] + 0.206667) <= 4 * S.se[0, 0] + 1e-6
    assert abs(S.asymmetry) <= max(4 * S.asymmetry_se, 1e-2)


def test_slutsky_cd0_corrected_targets(cd0, cd0_rotated):
    S = estimate_average_slutsky(cd0_rotated, cd0, (1, 1, 1), 20000)
    assert abs(S.S[0, 1] - 0.14) <= 4 * S.se[0, 1]
    assert abs(S.S[1, 0] - 0.04) <= 4 * S.se[1, 0]


def test_identified_set_membership(cd0, cd0_rotated):
    # the TILT counterpart is checked inside test_nonid_tilt
    fam, flow, x = cd0, cd0_rotated, (1.2, 1.1, 1.04)
    T = estimate_functionals(fam, x, 10000)
    S = estimate_average_slutsky(flow, fam, x, 10000)
    err = S.S + S.S.T - T.T
    assert np.all(np.abs(err) <= np.maximum(4 * np.hypot(S.sym_se, T.T_se), 1e-2))


def test_se_shrinks_like_root_n(tilt, tilt_rotated):
    x = (1.1, 1.1, 1.05)
    a = estimate_functionals(tilt, x, 5000, seed=1)
    b = estimate_functionals(tilt, x, 10000, seed=1)
    # q2 does not move with x under TILT, so that entry has no spread at all
    live = b.T_se > 0
    assert np.all(a.T_se[~live] == 0)
    r = a.T_se[live] / b.T_se[live]
    assert live.sum() >= 2 and np.all((r >= 1.3) & (r <= 1.55))
    sa = estimate_average_slutsky(tilt_rotated, tilt, x, 5000, seed=1)
    sb = estimate_average_slutsky(tilt_rotated, tilt, x, 10000, seed=1)
    live = sb.se > 0
    r = sa.se[live] / sb.se[live]
    assert live.any() and np.all((r >= 1.3) & (r <= 1.55))


def test_distances_basic(cd0):
    a = cd0.sample((1.2, 1.3, 1.4), 3000, 1)
    ks, e = sample_distance(a, a)
    assert ks == [0.0, 0.0] and e == 0.0
    b = cd0.sample((1.2, 1.3, 1.4), 3000, 2)
    assert energy_distance(a, b) >= 0
    assert ks_threshold(20000) == pytest.approx(0.02)
    assert ks_threshold(5000) == pytest.approx(0.04)


def test_marginal_distance_cd0(cd0, cd0_flow):
    x = (1.5, 1.2, 1.4)
    rep = marginal_distance(cd0_flow, cd0, x, 20000)
    assert rep.passed and max(rep.ks) <= 0.02
    neg = marginal_distance(cd0_flow, cd0, x, 20000, skip_final=True)
    assert max(neg.ks) > 0.1 and not neg.passed


def test_marginal_preservation_under_correction(tilt, tilt_flow, tilt_rotated):
    x = (1.05, 1.15, 1.2)
    for flow in (tilt_flow, tilt_rotated):
        rep = marginal_distance(flow, tilt, x, 10000)
        assert rep.passed and max(rep.ks) <= rep.ks_threshold


def test_nonid_zero_c_coincides(tilt, tilt_flow):
    rep = nonid_demo(tilt, 0.0, [(1.1, 1.1, 1.15)], n=2000, base=tilt_flow, marginal_n=5000)
    sy = rep["points"][0]["systems"]
    assert sy["symmetric"]["slutsky"] == sy["asymmetric"]["slutsky"]
    assert sy["symmetric"]["marginals"] == sy["asymmetric"]["marginals"]


def test_nonid_preconditions(cd0):
    with pytest.raises(ConfigurationError):
        nonid_demo(cd0, 0.2, [(1, 1, 1)])


def test_nonid_tilt(tilt, tilt_flow):
    corr = RotationCorrection(SlutskyTarget.constant(0.02))
    rep = nonid_demo(tilt, 0.02, [(1.1, 1.1, 1.15)], n=10000, base=tilt_flow, correction=corr)
    p = rep["points"][0]
    assert rep["pass"], p["systems"]["asymmetric"]["checks"]
    assert all(sy["checks"]["identified_set"] for sy in p["systems"].values())
    asym = p["systems"]["asymmetric"]["slutsky"]["asymmetry"]
    assert asym == pytest.approx(0.04, abs=1e-2)

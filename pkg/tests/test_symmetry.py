import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slutsky_forge.errors import ConfigurationError, ParseError
from slutsky_forge.symmetry import (ElasticityBounds, MomentGrid, grid_test, injected_asymmetry_grid,
                                    interval_compute, lattice_axes, moments_ingest)


def test_unit_elasticity_cd0_interval(cd0):
    mo = cd0.moments((1.0, 1.0, 1.0))
    iv = interval_compute((1, 1, 1), mo.dm, mo.M, ElasticityBounds(1.0, 1.0), 0, 1)
    assert iv.center == 0.0 and iv.halfwidth == 0.0 and iv.contains_zero


def test_widened_bounds_cd0_interval(cd0):
    mo = cd0.moments((1.0, 1.0, 1.0))
    iv = interval_compute((1, 1, 1), mo.dm, mo.M, ElasticityBounds(0.9, 1.1), 0, 1)
    assert iv.lower == pytest.approx(-0.018, abs=1e-15)
    assert iv.upper == pytest.approx(0.018, abs=1e-15)
    assert iv.contains_zero


def test_synthetic_node_excludes_zero():
    dm = np.zeros((2, 3))
    dm[0, 1] = 0.1
    M = np.array([[0.2, 0.09], [0.09, 0.2]])
    iv = interval_compute((1, 1, 1), dm, M, ElasticityBounds(1.0, 1.0), 0, 1)
    assert iv.lower == iv.upper == pytest.approx(0.1)
    assert not iv.contains_zero and iv.margin == pytest.approx(-0.1)


def test_interval_preconditions():
    dm, M = np.zeros((2, 3)), np.eye(2)
    with pytest.raises(ConfigurationError):
        ElasticityBounds(1.1, 0.9)
    with pytest.raises(ConfigurationError):
        interval_compute((1, 1, 1), dm, M, ElasticityBounds(), 1, 0)


def test_grid_cd0_consistent(cd0):
    axes = lattice_axes(cd0, 4)
    rep = grid_test(cd0, ElasticityBounds(0.9, 1.1), axes)
    assert rep.verdict == "consistent" and rep.passed
    P1, P2, Y = np.meshgrid(*axes, indexing="ij")
    expect = np.min(0.2 * 0.09 * Y / (P1 * P2))
    assert rep.worst_margin == pytest.approx(expect, rel=1e-12) and expect > 0
    assert len(rep.intervals) == 64


def test_grid_cd0_unit_bounds_all_zero(cd0):
    rep = grid_test(cd0, ElasticityBounds(1.0, 1.0), 4)
    assert rep.passed and all(iv.margin == 0.0 for iv in rep.intervals)


def test_injected_grid_rejected(cd0):
    g = injected_asymmetry_grid(cd0, lattice_axes(cd0, 4), 0.05)
    rep = grid_test(g, ElasticityBounds(1.0, 1.0))
    assert rep.verdict == "reject" and rep.worst_margin <= -0.05 + 1e-3
    assert set(rep.worst_location) == {"i", "j", "p1", "p2", "y"}


def test_injected_grid_rejected_after_ingest(cd0, tmp_path):
    g = injected_asymmetry_grid(cd0, lattice_axes(cd0, 4), 0.05)
    g.to_csv(tmp_path / "m.csv")
    rep = grid_test(moments_ingest(tmp_path / "m.csv"), ElasticityBounds(1.0, 1.0))
    assert rep.verdict == "reject" and rep.worst_margin <= -0.05 + 1e-3
    assert "edge nodes use one-sided differences" in rep.notes


def test_empty_lattice_is_an_error(cd0):
    with pytest.raises(ConfigurationError, match="empty lattice"):
        lattice_axes(cd0, 3, lower=(3.0, 3.0, 3.0))
    with pytest.raises(ConfigurationError):
        grid_test(cd0, ElasticityBounds(), [np.array([]), np.array([1.0]), np.array([1.0])])


def test_ingest_round_trip(cd0, tmp_path):
    axes = [np.array([1.2, 1.25, 1.3]), np.array([1.4, 1.45, 1.5]), np.array([1.1, 1.15, 1.2])]
    MomentGrid.from_family(cd0, axes).to_csv(tmp_path / "m.csv")
    g = moments_ingest(tmp_path / "m.csv")
    assert g.shape == (3, 3, 3) and g.one_sided[0, 1, 1] and not g.one_sided[1, 1, 1]
    b = ElasticityBounds(0.9, 1.1)
    for idx, x in g.nodes():
        mo = cd0.moments(x)
        ref = interval_compute(x, mo.dm, mo.M, b, 0, 1)
        got = interval_compute(x, g.dm[idx], g.M[idx], b, 0, 1)
        assert abs(got.lower - ref.lower) <= 1e-3 and abs(got.upper - ref.upper) <= 1e-3
        assert np.max(np.abs(g.dm[idx] - mo.dm)) <= 1e-3


def _dump(cd0, path, drop=None):
    axes = [np.array([1.2, 1.25, 1.3])] * 3
    MomentGrid.from_family(cd0, axes).to_csv(path)
    lines = path.read_text().splitlines()
    if drop is not None:
        del lines[drop]
    path.write_text("\n".join(lines) + "\n")


def test_missing_node_is_named(cd0, tmp_path):
    p = tmp_path / "m.csv"
    _dump(cd0, p, drop=5)
    with pytest.raises(ParseError, match=r"missing lattice node \(p1=1\.2, p2=1\.25, y=1\.25\)"):
        moments_ingest(p)


def test_single_row_file(cd0, tmp_path):
    p = tmp_path / "m.csv"
    _dump(cd0, p)
    p.write_text("\n".join(p.read_text().splitlines()[:2]) + "\n")
    with pytest.raises(ParseError, match="insufficient nodes for differentiation"):
        moments_ingest(p)


def test_bad_values_cite_row(cd0, tmp_path):
    p = tmp_path / "m.csv"
    _dump(cd0, p)
    lines = p.read_text().splitlines()
    lines[3] = lines[3].replace(lines[3].split(",")[3], "nan", 1)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="row 4"):
        moments_ingest(p)


def test_interval_arithmetic_exact(cd0):
    g = MomentGrid.from_family(cd0, lattice_axes(cd0, 3))
    b = ElasticityBounds(0.8, 1.3)
    rep = grid_test(g, b)
    for iv, (idx, x) in zip(rep.intervals, g.nodes()):
        center = g.dm[idx][0, 1] - g.dm[idx][1, 0]
        half = (1.3 - 0.8) / x[-1] * g.M[idx][0, 1]
        assert iv.center == center and iv.halfwidth == half
        assert iv.contains_zero == (iv.margin >= 0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 0.5), st.floats(-0.2, 0.2))
def test_widening_never_flips_to_reject(lo, width, extra, c):
    dm = np.zeros((2, 3))
    dm[0, 1] = c
    M = np.array([[0.3, 0.09], [0.09, 0.3]])
    a = interval_compute((1, 1, 1.2), dm, M, ElasticityBounds(lo, lo + width), 0, 1)
    b = interval_compute((1, 1, 1.2), dm, M, ElasticityBounds(lo - extra, lo + width + extra), 0, 1)
    assert b.halfwidth >= a.halfwidth
    assert b.contains_zero or not a.contains_zero


def test_symmetric_system_passes_with_slack(cd0, tmp_path):
    g = injected_asymmetry_grid(cd0, lattice_axes(cd0, 4), 0.0)
    g.to_csv(tmp_path / "m.csv")
    for src in (g, moments_ingest(tmp_path / "m.csv")):
        assert grid_test(src, ElasticityBounds(1.0, 1.0), slack=1e-3).passed


def test_per_good_bounds_shift():
    dm, M = np.zeros((2, 3)), np.array([[0.3, 0.1], [0.1, 0.3]])
    b = ElasticityBounds(np.array([1.0, 0.8]), np.array([1.2, 0.8]), per_good=True)
    iv = interval_compute((1, 1, 2.0), dm, M, b, 0, 1)
    assert iv.shift == pytest.approx(0.5 * (2.2 - 1.6) * 0.1 / 2)
    assert iv.halfwidth == pytest.approx(0.5 * 0.2 * 0.1 / 2)


def test_intervals_csv(cd0, tmp_path):
    rep = grid_test(cd0, ElasticityBounds(0.9, 1.1), 2)
    rep.write_csv(tmp_path / "iv.csv")
    lines = (tmp_path / "iv.csv").read_text().splitlines()
    assert lines[0] == "i,j,p1,p2,y,center,halfwidth,margin,contains_zero"
    assert len(lines) == 9 and lines[1].endswith("true")

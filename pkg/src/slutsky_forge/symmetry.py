"""Testable asymmetry intervals under income-elasticity bounds.

If every good's income elasticity lies in [l(x), u(x)], the difference
E[S]_ij - E[S]_ji of the average Slutsky matrix must lie in

    center +- halfwidth,
    center    = d/dp_j m_i - d/dp_i m_j,
    halfwidth = (u - l) / y * |M_ij|,

which only involves identified moments.  Symmetry of the average Slutsky
matrix then requires every interval to contain zero.  With per-good bounds
[l_i, u_i] the interval is shifted by ((l_i + u_i) - (l_j + u_j)) / 2 * M_ij / y
and has halfwidth ((u_i - l_i) + (u_j - l_j)) / 2 * |M_ij| / y.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParseError
from .families import DemandFamily

_FLOAT = "%.17g"


@dataclass
class ElasticityBounds:
    """Lower and upper income-elasticity bounds.

    ``lower``/``upper`` are scalars, arrays over the lattice (per node), or,
    with ``per_good=True``, arrays whose last axis runs over goods.
    """

    lower: object = 1.0
    upper: object = 1.0
    per_good: bool = False

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ConfigurationError("elasticity bounds must be finite")
        if np.any(lo > hi):
            raise ConfigurationError("elasticity lower bound exceeds upper bound")
        self.lower, self.upper = lo, hi

    def at(self, node: tuple, i: int) -> tuple[float, float]:
        def pick(a):
            if self.per_good:
                a = a[..., i]
            if a.ndim == 0:
                return float(a)
            return float(a[node])

        return pick(self.lower), pick(self.upper)


@dataclass
class AsymmetryInterval:
    x: np.ndarray
    i: int
    j: int
    center: float
    halfwidth: float
    shift: float = 0.0

    def __post_init__(self):
        if self.i >= self.j:
            raise ConfigurationError("intervals are defined for pairs i < j")
        if self.halfwidth < 0:
            raise ConfigurationError("negative halfwidth")

    @property
    def midpoint(self) -> float:
        return self.center + self.shift

    @property
    def lower(self) -> float:
        return self.midpoint - self.halfwidth

    @property
    def upper(self) -> float:
        return self.midpoint + self.halfwidth

    @property
    def margin(self) -> float:
        return self.halfwidth - abs(self.midpoint)

    @property
    def contains_zero(self) -> bool:
        return self.margin >= 0


@dataclass
class MomentGrid:
    """Moments on a rectangular lattice over price-income space.

    ``m`` has shape lattice + (d,), ``M`` lattice + (d, d) and ``dm``
    lattice + (d, d + 1) with dm[..., i, k] = d m_i / d x_k.  ``one_sided``
    flags nodes where some derivative used a one-sided difference.
    """

    axes: list
    m: np.ndarray
    M: np.ndarray
    dm: np.ndarray
    one_sided: np.ndarray | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    source: str = ""

    def __post_init__(self):
        self.axes = [np.asarray(a, dtype=float) for a in self.axes]
        shape = tuple(len(a) for a in self.axes)
        d = len(self.axes) - 1
        if self.m.shape != shape + (d,) or self.M.shape != shape + (d, d) or self.dm.shape != shape + (d, d + 1):
            raise ConfigurationError("moment arrays do not match the lattice shape")
        if self.one_sided is None:
            self.one_sided = np.zeros(shape, dtype=bool)

    @property
    def dim(self) -> int:
        return len(self.axes) - 1

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    def nodes(self):
        for idx in itertools.product(*(range(n) for n in self.shape)):
            yield idx, np.array([a[k] for a, k in zip(self.axes, idx)])

    @classmethod
    def from_family(cls, family: DemandFamily, axes) -> "MomentGrid":
        """Oracle moments and exact gradients at every lattice node."""
        axes = [np.asarray(a, dtype=float) for a in axes]
        shape = tuple(len(a) for a in axes)
        d = family.dim
        m = np.empty(shape + (d,))
        M = np.empty(shape + (d, d))
        dm = np.empty(shape + (d, d + 1))
        for idx in itertools.product(*(range(n) for n in shape)):
            x = np.array([a[k] for a, k in zip(axes, idx)])
            mo = family.moments(x)
            m[idx], M[idx], dm[idx] = mo.m, mo.M, mo.dm
        return cls(axes, m, M, dm, source=f"oracle:{family.name}")

    def to_csv(self, path) -> None:
        d = self.dim
        header = [f"p{k + 1}" for k in range(d)] + ["y"] + [f"m{k + 1}" for k in range(d)]
        header += [f"M{a + 1}{b + 1}" for a in range(d) for b in range(d)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for idx, x in self.nodes():
                row = list(x) + list(self.m[idx]) + list(self.M[idx].ravel())
                w.writerow([_FLOAT % v for v in row])


def injected_asymmetry_grid(family: DemandFamily, axes, c: float) -> MomentGrid:
    """Oracle grid whose means carry a cross-price asymmetry of 2c.

    m_1 gains c (p_2 - p_2_lo) and m_2 loses c (p_1 - p_1_lo), so that
    d/dp_2 m_1 - d/dp_1 m_2 shifts by exactly 2c at every node.
    """
    if family.dim < 2:
        raise ConfigurationError("asymmetry needs at least two goods")
    g = MomentGrid.from_family(family, axes)
    lo = family.domain.lo
    P1, P2 = np.meshgrid(g.axes[0], g.axes[1], indexing="ij")
    extra = (slice(None), slice(None)) + (None,) * (g.dim - 1)
    m = g.m.copy()
    m[..., 0] += (c * (P2 - lo[1]))[extra]
    m[..., 1] -= (c * (P1 - lo[0]))[extra]
    dm = g.dm.copy()
    dm[..., 0, 1] += c
    dm[..., 1, 0] -= c
    return MomentGrid(g.axes, m, g.M, dm, source=f"injected:{family.name}:c={c!r}")


# -- ingestion ---------------------------------------------------------------------------
def moments_ingest(path, d: int | None = None) -> MomentGrid:
    """Read a moment lattice from CSV and difference it.

    Header: p1..pd, y, m1..md, M11, M12, ..., Mdd, optionally followed by
    ``lower`` and ``upper`` elasticity-bound columns.  Gradients are central
    on interior nodes and second-order one-sided at lattice edges.
    """
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise ParseError(f"cannot read moments file {path}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if d is None:
        d = sum(1 for h in header if h.startswith("p") and h[1:].isdigit())
    if d < 1:
        raise ParseError(f"{path}: no price columns in header")
    expected = [f"p{k + 1}" for k in range(d)] + ["y"] + [f"m{k + 1}" for k in range(d)]
    expected += [f"M{a + 1}{b + 1}" for a in range(d) for b in range(d)]
    extra = header[len(expected):]
    if header[: len(expected)] != expected or extra not in ([], ["lower", "upper"]):
        raise ParseError(f"{path}: header must be {','.join(expected)}[,lower,upper], got {','.join(header)}")
    data = []
    for lineno, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise ParseError(f"{path}: row {lineno} has {len(r)} fields, expected {len(header)}")
        try:
            vals = [float(v) for v in r]
        except ValueError as exc:
            raise ParseError(f"{path}: row {lineno}: {exc}") from None
        if not np.all(np.isfinite(vals)):
            raise ParseError(f"{path}: row {lineno} has non-finite values")
        data.append(vals)
    data = np.array(data, dtype=float).reshape(-1, len(header))
    axes = [np.unique(data[:, k]) for k in range(d + 1)]
    shape = tuple(len(a) for a in axes)
    if data.shape[0] < 2 or min(shape) < 3:
        raise ParseError(f"{path}: insufficient nodes for differentiation (need at least 3 per axis, got "
                         f"{'x'.join(map(str, shape))})")
    index = {}
    for lineno, row in enumerate(data, start=2):
        key = tuple(int(np.searchsorted(axes[k], row[k])) for k in range(d + 1))
        if key in index:
            raise ParseError(f"{path}: row {lineno} duplicates the node at row {index[key][0]}")
        index[key] = (lineno, row)
    for key in itertools.product(*(range(n) for n in shape)):
        if key not in index:
            node = [float(axes[k][key[k]]) for k in range(d + 1)]
            names = [f"p{k + 1}" for k in range(d)] + ["y"]
            desc = ", ".join(f"{nm}={v!r}" for nm, v in zip(names, node))
            raise ParseError(f"{path}: missing lattice node ({desc})")
    vals = np.empty(shape + (len(header) - d - 1,))
    for key, (_, row) in index.items():
        vals[key] = row[d + 1 :]
    m = vals[..., :d]
    M = vals[..., d : d + d * d].reshape(shape + (d, d))
    if not np.allclose(M, np.swapaxes(M, -1, -2), rtol=1e-12, atol=1e-15):
        raise ParseError(f"{path}: second-moment matrix is not symmetric")
    dm = np.empty(shape + (d, d + 1))
    for i in range(d):
        grads = np.gradient(m[..., i], *axes, edge_order=2)
        for k in range(d + 1):
            dm[..., i, k] = grads[k]
    one_sided = np.zeros(shape, dtype=bool)
    for k in range(d + 1):
        sl = [slice(None)] * (d + 1)
        sl[k] = 0
        one_sided[tuple(sl)] = True
        sl[k] = -1
        one_sided[tuple(sl)] = True
    lower = upper = None
    if extra:
        lower, upper = vals[..., -2], vals[..., -1]
    return MomentGrid(axes, m, M, dm, one_sided, lower, upper, source=str(path))


# -- intervals -------------------------------------------------------------------------
def interval_compute(x, m_grad: np.ndarray, M: np.ndarray, bounds: ElasticityBounds, i: int, j: int,
                     node: tuple = ()) -> AsymmetryInterval:
    """Interval for E[S]_ij - E[S]_ji from dm (d, d+1) and M (d, d) at x."""
    x = np.asarray(x, dtype=float)
    y = x[-1]
    if not i < j:
        raise ConfigurationError("intervals are defined for pairs i < j")
    center = float(m_grad[i, j] - m_grad[j, i])
    li, ui = bounds.at(node, i)
    lj, uj = bounds.at(node, j)
    if li > ui or lj > uj:
        raise ConfigurationError("elasticity lower bound exceeds upper bound")
    Mij = float(M[i, j])
    if bounds.per_good:
        shift = 0.5 * ((li + ui) - (lj + uj)) * Mij / y
        halfwidth = 0.5 * ((ui - li) + (uj - lj)) * abs(Mij) / y
    else:
        shift = 0.0
        halfwidth = (ui - li) / y * abs(Mij)
    return AsymmetryInterval(x, i, j, center, halfwidth, shift)


@dataclass
class GridTestReport:
    intervals: list
    slack: float
    verdict: str
    worst_margin: float
    worst_location: dict
    source: str = ""
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.verdict == "consistent"

    def summary(self) -> dict:
        return {"verdict": self.verdict, "slack": self.slack, "worst_margin": self.worst_margin,
                "worst_location": self.worst_location, "n_intervals": len(self.intervals),
                "n_excluding_zero": sum(not iv.contains_zero for iv in self.intervals),
                "source": self.source, "notes": list(self.notes)}

    def write_csv(self, path) -> None:
        d = len(self.intervals[0].x) - 1
        header = ["i", "j"] + [f"p{k + 1}" for k in range(d)] + ["y", "center", "halfwidth", "margin",
                                                                 "contains_zero"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for iv in self.intervals:
                w.writerow([iv.i + 1, iv.j + 1] + [_FLOAT % v for v in iv.x]
                           + [_FLOAT % iv.midpoint, _FLOAT % iv.halfwidth, _FLOAT % iv.margin,
                              str(iv.contains_zero).lower()])


def lattice_axes(family: DemandFamily, counts, lower=None, upper=None) -> list:
    """Uniform per-axis node sets over the intersection of a sub-box with the family box."""
    lo, hi = family.domain.lo, family.domain.hi
    k = family.dim + 1
    counts = [int(counts)] * k if np.ndim(counts) == 0 else [int(c) for c in counts]
    if len(counts) != k or min(counts) < 1:
        raise ConfigurationError(f"lattice needs {k} positive node counts, got {counts}")
    a = lo if lower is None else np.maximum(lo, np.asarray(lower, dtype=float))
    b = hi if upper is None else np.minimum(hi, np.asarray(upper, dtype=float))
    if np.any(a > b):
        raise ConfigurationError("lattice box does not intersect the price-income box: empty lattice")
    return [np.linspace(a[t], b[t], counts[t]) if counts[t] > 1 else np.array([a[t]]) for t in range(k)]


def grid_test(source, bounds: ElasticityBounds, lattice=None, slack: float = 0.0) -> GridTestReport:
    """Check 0 in I_ij(x) for all pairs i < j and lattice nodes x.

    ``source`` is a family (oracle moments on ``lattice``, a list of axes or
    a node count per axis) or a MomentGrid.  Verdict is "reject" iff some
    margin falls below -slack.
    """
    if slack < 0:
        raise ConfigurationError("slack must be nonnegative")
    if isinstance(source, DemandFamily):
        if lattice is None:
            raise ConfigurationError("a lattice is required when testing a family")
        axes = lattice if isinstance(lattice, (list, tuple)) and np.ndim(lattice[0]) == 1 else \
            lattice_axes(source, lattice)
        grid = MomentGrid.from_family(source, axes)
    elif isinstance(source, MomentGrid):
        grid = source
    else:
        raise ConfigurationError("source must be a demand family or a moment grid")
    if grid.lower is not None and grid.upper is not None:
        bounds = ElasticityBounds(grid.lower, grid.upper)
    if int(np.prod(grid.shape)) == 0:
        raise ConfigurationError("empty lattice")
    d = grid.dim
    if d < 2:
        raise ConfigurationError("asymmetry intervals need at least two goods")
    intervals = []
    for idx, x in grid.nodes():
        for i in range(d):
            for j in range(i + 1, d):
                intervals.append(interval_compute(x, grid.dm[idx], grid.M[idx], bounds, i, j, idx))
    worst = min(intervals, key=lambda iv: iv.margin)
    verdict = "reject" if worst.margin < -slack else "consistent"
    names = [f"p{k + 1}" for k in range(d)] + ["y"]
    loc = {"i": worst.i + 1, "j": worst.j + 1, **{nm: float(v) for nm, v in zip(names, worst.x)}}
    notes = []
    if np.any(grid.one_sided):
        notes.append("edge nodes use one-sided differences")
    return GridTestReport(intervals, slack, verdict, float(worst.margin), loc, grid.source, notes)

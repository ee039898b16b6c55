"""Flow maps that push the reference law of demand onto mu_x.

The composite map is built leg by leg: p_1 moves from its lower bound to its
target value, then p_2 (with p_1 fixed), ..., and finally y.  Each leg
transports the pulled-back density on the fixed reference support with the
Neumann-Poisson velocity grad(u_t) / rho_t, where

    Laplace(u_t) = -d/dt rho_t,   zero normal flux,   mean(u_t) = 0.

Velocities are precomputed at K uniform knots of the leg and interpolated
linearly in t and bilinearly in space.  After the last leg the reference
position is mapped forward by the support map T_x.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .elliptic import EllipticProblem, solve_neumann
from .errors import ConfigurationError, IntegrationError, RegularityError
from .families import BoxDomain, DemandFamily
from .grid import Grid2D, ScalarGridField, VectorGridField, bilinear, grad_field

DEFAULT_KNOTS = 9
DEFAULT_STEPS = 64
TRANSPORT_TOL = 1e-12
LIPSCHITZ_SAFETY = 1.5
CLAMP_TOL = 1e-9
CACHE_QUANTUM = 1e-9


def velocity_from_potential(u: ScalarGridField, rho: ScalarGridField, floor: float) -> VectorGridField:
    """grad(u) / max(rho, floor) at every node.

    Every node of the reference grid lies in the support, so a density below
    ``floor`` anywhere is a regularity failure of the family.
    """
    if floor <= 0:
        raise ConfigurationError("density floor must be positive")
    low = float(np.min(rho.values))
    if low < floor:
        raise RegularityError(f"density {low:.3e} below floor {floor:.3e} inside the support")
    g = grad_field(u)
    v = g.values / np.maximum(rho.values, floor)[..., None]
    out = VectorGridField(u.grid, v)
    out.meta["boundary_normal_max"] = out.boundary_normal_max()
    return out


def mcshane_extend(nodes: np.ndarray, values: np.ndarray, L: float, query: np.ndarray,
                   chunk: int = 256) -> np.ndarray:
    """Componentwise sup over nodes of (value - L * distance).

    ``nodes`` (m, d), ``values`` (m, k), ``query`` (N, d) -> (N, k).
    """
    nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    query = np.atleast_2d(np.asarray(query, dtype=float))
    out = np.empty((query.shape[0], values.shape[1]))
    for s in range(0, query.shape[0], chunk):
        q = query[s : s + chunk]
        dist = np.sqrt(((q[:, None, :] - nodes[None, :, :]) ** 2).sum(-1))
        out[s : s + chunk] = np.max(values[None, :, :] - L * dist[:, :, None], axis=1)
    return out


def lipschitz_extend(v: VectorGridField, box: BoxDomain, L: float, query) -> np.ndarray:
    """Interpolated v inside ``box``; McShane extension with constant L outside."""
    query = np.atleast_2d(np.asarray(query, dtype=float))
    out = bilinear(v.grid, v.values, query)
    outside = ~box.contains(query)
    if np.any(outside):
        out[outside] = mcshane_extend(v.grid.points(), v.values.reshape(-1, 2), L, query[outside])
    return out


@dataclass
class Leg:
    """One transport leg: coordinate ``coord`` of x runs over [t0, t1].

    ``prefix`` holds the fixed values of the coordinates before ``coord``;
    later coordinates sit at their lower bounds.  ``extra`` optionally adds a
    velocity ``extra(t, z)`` on top of the interpolated knot fields.
    """

    coord: int
    prefix: tuple
    t0: float
    t1: float
    knots: np.ndarray
    fields: np.ndarray
    grid: Grid2D
    lipschitz: float
    steps: int = DEFAULT_STEPS
    extra: Callable | None = None
    max_step: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.knots) < 9:
            raise ConfigurationError(f"a leg needs at least 9 knots, got {len(self.knots)}")
        if not np.all(np.isfinite(self.fields)):
            raise RegularityError("non-finite knot velocity")
        if not self.lipschitz > 0:
            raise ConfigurationError("Lipschitz constant must be positive")
        self.zero_base = not np.any(self.fields)
        self._nodes = None

    @property
    def is_identity(self) -> bool:
        return self.zero_base and self.extra is None

    def base_field_at(self, t: float) -> np.ndarray:
        K = len(self.knots)
        s = (t - self.t0) / (self.t1 - self.t0) * (K - 1)
        k = int(min(max(np.floor(s), 0), K - 2))
        lam = min(max(s - k, 0.0), 1.0)
        return (1.0 - lam) * self.fields[k] + lam * self.fields[k + 1]

    def base_velocity(self, t: float, z: np.ndarray) -> np.ndarray:
        if self.zero_base:
            return np.zeros_like(z)
        F = self.base_field_at(t)
        v = bilinear(self.grid, F, z)
        outside = ~self.grid.box.contains(z)
        if np.any(outside):
            if self._nodes is None:
                self._nodes = self.grid.points()
            v[outside] = mcshane_extend(self._nodes, F.reshape(-1, 2), self.lipschitz, z[outside])
        return v

    def velocity(self, t: float, z: np.ndarray) -> np.ndarray:
        v = self.base_velocity(t, z)
        if self.extra is not None:
            v = v + self.extra(t, z)
        return v

    def step_count(self, t_start: float, t_target: float) -> int:
        """RK4 steps for [t_start, t_target]: fixed count, or a step-size cap if set."""
        if self.max_step is None:
            return self.steps
        return max(1, int(np.ceil(abs(t_target - t_start) / self.max_step - 1e-9)))

    def x_at(self, family: DemandFamily, t: float) -> np.ndarray:
        x = family.x_ref.copy()
        x[: self.coord] = self.prefix
        x[self.coord] = t
        return x


def build_leg(family: DemandFamily, coord: int, prefix, grid: Grid2D, knots: int = DEFAULT_KNOTS,
              tol: float = TRANSPORT_TOL, steps: int = DEFAULT_STEPS) -> Leg:
    """Precompute the Neumann-Poisson velocity at each knot of a leg."""
    if family.dim != 2:
        raise ConfigurationError("transport legs are implemented for d = 2")
    prefix = tuple(float(v) for v in prefix)
    if len(prefix) != coord:
        raise ConfigurationError(f"leg {coord} needs {coord} prefix values, got {len(prefix)}")
    lo, hi = family.domain.lo, family.domain.hi
    t0, t1 = float(lo[coord]), float(hi[coord])
    ts = np.linspace(t0, t1, int(knots))
    nodes = grid.points()
    fields = np.zeros((len(ts), *grid.shape, 2))
    normal_max = 0.0
    worst_mean = 0.0
    for k, t in enumerate(ts):
        x = family.x_ref.copy()
        x[:coord] = prefix
        x[coord] = t
        family.check_x(x)
        dr = family.pullback_density_dx(x, nodes, coord).reshape(grid.shape)
        if not np.any(dr):
            continue
        rho = ScalarGridField(grid, family.pullback_density(x, nodes).reshape(grid.shape))
        u = solve_neumann(EllipticProblem(grid, dr), tol)
        worst_mean = max(worst_mean, abs(u.meta["info"].rhs_mean))
        v = velocity_from_potential(u, rho, family.density_floor)
        normal_max = max(normal_max, v.meta["boundary_normal_max"])
        vals = v.values.copy()
        # enforce the Neumann condition on the transport velocity itself
        vals[0, :, 0] = vals[-1, :, 0] = 0.0
        vals[:, 0, 1] = vals[:, -1, 1] = 0.0
        fields[k] = vals
    jac = max((VectorGridField(grid, f).max_jacobian_norm() for f in fields), default=0.0)
    L = max(LIPSCHITZ_SAFETY * jac, 1e-8)
    leg = Leg(coord, prefix, t0, t1, ts, fields, grid, L, steps)
    leg.diagnostics.update(boundary_normal_max=normal_max, rhs_mean_max=worst_mean)
    return leg


def leg_integrate(leg: Leg, t_target: float, omega, steps: int | None = None,
                  t_start: float | None = None) -> np.ndarray:
    """Classical RK4 with uniform steps from ``t_start`` (default: leg start) to ``t_target``."""
    z = np.array(omega, dtype=float, ndmin=2)
    t0 = leg.t0 if t_start is None else float(t_start)
    if not (min(leg.t0, leg.t1) - 1e-12 <= t_target <= max(leg.t0, leg.t1) + 1e-12):
        raise ConfigurationError(f"target {t_target} outside leg interval [{leg.t0}, {leg.t1}]")
    if t_target == t0 or leg.is_identity:
        return z.copy()
    n = int(steps or leg.steps)
    dt = (t_target - t0) / n
    V = leg.velocity
    for i in range(n):
        t = t0 + i * dt
        k1 = V(t, z)
        k2 = V(t + 0.5 * dt, z + 0.5 * dt * k1)
        k3 = V(t + 0.5 * dt, z + 0.5 * dt * k2)
        k4 = V(t + dt, z + dt * k3)
        z = z + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(z)):
        raise IntegrationError(f"non-finite trajectory on leg {leg.coord}")
    return z


def _key(values) -> tuple:
    return tuple(int(round(v / CACHE_QUANTUM)) for v in values)


class CompositeFlow:
    """Map (x, omega) -> demand at x of the consumer who demands omega at x_ref.

    ``correction`` (see :mod:`slutsky_forge.rotation`) replaces the income
    leg by a modified one; all Step-1 legs are cached per quantised prefix
    and shared with flows derived through :meth:`with_correction`.
    """

    def __init__(self, family: DemandFamily, grid_n: int = 65, knots: int = DEFAULT_KNOTS,
                 steps: int = DEFAULT_STEPS, tol: float = TRANSPORT_TOL, correction=None,
                 _cache=None):
        if family.dim != 2:
            raise ConfigurationError("composite flows are implemented for d = 2")
        if knots < 9:
            raise ConfigurationError("knot count must be at least 9")
        if steps < 1:
            raise ConfigurationError("RK4 step count must be positive")
        self.family = family
        self.grid = Grid2D(family.reference_support, grid_n)
        self.knots = int(knots)
        self.steps = int(steps)
        self.tol = tol
        self.correction = correction
        self._legs = {} if _cache is None else _cache
        self._corrected = {}
        self._lock = threading.RLock()

    @property
    def dim(self) -> int:
        return self.family.dim

    def with_correction(self, correction) -> "CompositeFlow":
        return CompositeFlow(self.family, self.grid.n, self.knots, self.steps, self.tol,
                             correction, _cache=self._legs)

    def with_steps(self, steps: int) -> "CompositeFlow":
        return CompositeFlow(self.family, self.grid.n, self.knots, steps, self.tol, self.correction,
                             _cache=self._legs)

    def base_leg(self, coord: int, prefix) -> Leg:
        key = (coord, _key(prefix))
        with self._lock:
            leg = self._legs.get(key)
            if leg is None:
                leg = build_leg(self.family, coord, prefix, self.grid, self.knots, self.tol, self.steps)
                self._legs[key] = leg
        return leg

    def leg(self, coord: int, prefix) -> Leg:
        base = self.base_leg(coord, prefix)
        if coord != self.dim or self.correction is None:
            return base
        key = _key(prefix)
        with self._lock:
            leg = self._corrected.get(key)
            if leg is None:
                leg = self.correction.modified_leg(self, base, prefix)
                self._corrected[key] = leg
        return leg

    def evaluate(self, x, omega, *, skip_final: bool = False, info: dict | None = None) -> np.ndarray:
        """Reference-domain position after all legs (before the support map)."""
        x = self.family.check_x(x)
        z = np.array(omega, dtype=float, ndmin=2)
        ref = self.family.x_ref
        last = self.dim if not skip_final else self.dim - 1
        for k in range(last + 1):
            if x[k] == ref[k]:
                continue
            leg = self.leg(k, x[:k])
            steps = leg.step_count(leg.t0, float(x[k])) if leg.max_step is not None else self.steps
            z = leg_integrate(leg, float(x[k]), z, steps)
        box = self.grid.box
        below, above = z < box.lo, z > box.hi
        if np.any(below) or np.any(above):
            excess = np.maximum(box.lo - z, z - box.hi).max(axis=1)
            small = (excess > 0) & (excess <= CLAMP_TOL)
            z[small] = np.clip(z[small], box.lo, box.hi)
            if info is not None:
                info["clamped"] = info.get("clamped", 0) + int(small.sum())
                info["excursions"] = info.get("excursions", 0) + int((excess > CLAMP_TOL).sum())
                info["max_excursion"] = max(info.get("max_excursion", 0.0), float(excess.max()))
        return z

    def __call__(self, x, omega, *, skip_final: bool = False, info: dict | None = None) -> np.ndarray:
        x = self.family.check_x(x)
        if np.array_equal(x, self.family.x_ref):
            return np.array(omega, dtype=float, ndmin=2).copy()
        z = self.evaluate(x, omega, skip_final=skip_final, info=info)
        x_map = x.copy()
        if skip_final:
            x_map[-1] = self.family.x_ref[-1]
        return self.family.support_map(x_map, z)

    def income_velocity(self, x, z) -> np.ndarray:
        """Step-1 income derivative in demand space at reference position z.

        d/dy T_x(Z(y)) = dT_x/dy (z) + DT_x(z) v_y(z), with v_y the velocity
        of the unmodified income leg.
        """
        x = self.family.check_x(x)
        leg = self.base_leg(self.dim, x[:-1])
        vz = leg.base_velocity(float(x[-1]), z)
        DT = self.family.support_map_jacobian(x, z)
        return self.family.support_map_dx(x, z, self.dim) + np.einsum("nij,nj->ni", DT, vz)


def composite_eval(flow: CompositeFlow, x, omega, info: dict | None = None) -> np.ndarray:
    return flow(x, omega, info=info)


@dataclass
class FlowJacobian:
    phi: np.ndarray
    Dp: np.ndarray  # [n, i, j] = d Phi_i / d p_j
    Dy: np.ndarray
    schemes: list
    h_p: float
    h_y: float

    @property
    def one_sided(self) -> bool:
        return any(s != "central" for s in self.schemes)


def _fd_scheme(lo, hi, t, h):
    if t - h >= lo - 1e-12 and t + h <= hi + 1e-12:
        return "central"
    if t + 2 * h <= hi + 1e-12:
        return "forward"
    if t - 2 * h >= lo - 1e-12:
        return "backward"
    raise ConfigurationError(f"coordinate interval [{lo}, {hi}] too short for step {h}")


def fd_derivative(fn, x, k, h, lo, hi):
    """Second-order difference of ``fn`` in coordinate k; returns (derivative, scheme)."""
    scheme = _fd_scheme(lo[k], hi[k], x[k], h)

    def at(s):
        xs = np.array(x, dtype=float)
        xs[k] = x[k] + s * h
        return fn(xs)

    if scheme == "central":
        return (at(1) - at(-1)) / (2 * h), scheme
    f0 = fn(np.array(x, dtype=float))
    if scheme == "forward":
        return (-3 * f0 + 4 * at(1) - at(2)) / (2 * h), scheme
    return (3 * f0 - 4 * at(-1) + at(-2)) / (2 * h), scheme


def flow_jacobian_fd(flow: CompositeFlow, x, omega, h_p: float = 1e-3, h_y: float = 1e-3) -> FlowJacobian:
    """Finite-difference price and income derivatives of the composite flow."""
    fam = flow.family
    x = fam.check_x(x)
    d = fam.dim
    lo, hi = fam.domain.lo, fam.domain.hi
    phi = flow(x, omega)
    Dp = np.empty((phi.shape[0], d, d))
    schemes = []
    for j in range(d):
        D, s = fd_derivative(lambda xs: flow(xs, omega), x, j, h_p, lo, hi)
        Dp[:, :, j] = D
        schemes.append(s)
    Dy, s = fd_derivative(lambda xs: flow(xs, omega), x, d, h_y, lo, hi)
    schemes.append(s)
    return FlowJacobian(phi, Dp, Dy, schemes, h_p, h_y)

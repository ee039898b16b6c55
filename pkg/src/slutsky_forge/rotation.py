"""Marginal-preserving rotation of the income leg.

Adding a velocity w_x with div(rho_x w_x) = 0 to the income leg leaves every
cross-sectional law unchanged but shifts the average Slutsky matrix.  Taking

    w_x = -(1 / rho_x) a(x) grad(phi_x),

with a(x) antisymmetric and phi_x a unit-mass smooth bump carried along the
support map, gives  E[w_i Q_j] = a_ij(x).  The coefficients are chosen as

    a_ij(x) = S_ij(x) - d/dp_j m_i(x) - E[vbar_i(Qbar) Qbar_j],

so that the corrected system has average Slutsky matrix S = T/2 + C.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigurationError, InconsistencyError, ParseError
from .families import STREAM_COEFFS, BoxDomain, DemandFamily
from .transport import CompositeFlow, Leg, leg_integrate

DEFAULT_RADIUS_FRACTION = 0.8
DEFAULT_COEFF_N = 20000
# The rotation turns the bump region fast (tens of radians per unit income),
# so the corrected leg uses a step-size cap instead of a fixed step count.
DEFAULT_MAX_STEP = 1e-3
# largest rotation-rate x step product allowed on a corrected leg
DEFAULT_MAX_TURN = 0.15
DEFECT_SIGMAS = 5.0
# entries with identically zero draws (e.g. a velocity component that vanishes) have SE 0
ROUNDOFF_FLOOR = 1e-12
# the bump is cut to exactly zero where exp(-1/(1-s^2)) < exp(-600); this also
# keeps exp out of its slow underflow path
_SHELL = 1.0 / 600.0


# -- bump ------------------------------------------------------------------------
def _unit_ball_mass(d: int) -> float:
    """Integral of exp(-1/(1-|s|^2)) over the unit ball in R^d."""
    radial, _ = integrate.quad(lambda s: math.exp(-1.0 / (1.0 - s * s)) * s ** (d - 1), 0.0, 1.0,
                               epsabs=1e-15, epsrel=1e-13)
    sphere = 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)
    return sphere * radial


@dataclass(frozen=True)
class BumpFunction:
    """Radial C-infinity bump on B(center, radius), normalised to unit mass."""

    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError("bump radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "mass", self.radius ** len(self.center) * _unit_ball_mass(len(self.center)))

    @classmethod
    def for_support(cls, support: BoxDomain, fraction: float = DEFAULT_RADIUS_FRACTION) -> "BumpFunction":
        bump = cls(tuple(support.center), fraction * float(np.min(support.half_sides)))
        bump.check_inside(support)
        return bump

    def check_inside(self, support: BoxDomain, margin: float = 0.25) -> None:
        c = np.asarray(self.center)
        gap = np.minimum(c - self.radius - support.lo, support.hi - c - self.radius)
        if np.any(gap < margin * self.radius - 1e-12):
            raise ConfigurationError(
                f"bump ball (center {list(self.center)}, radius {self.radius}) is not inside the reference "
                f"support with margin {margin} r")

    def __call__(self, omega) -> tuple[np.ndarray, np.ndarray]:
        """Value and gradient at reference points ``omega`` (N, d)."""
        omega = np.atleast_2d(np.asarray(omega, dtype=float))
        diff = omega - np.asarray(self.center)
        s2 = np.sum(diff**2, axis=1) / self.radius**2
        val = np.zeros(omega.shape[0])
        grad = np.zeros_like(omega)
        inside = s2 < 1.0 - _SHELL
        if np.any(inside):
            g = 1.0 - s2[inside]
            val[inside] = np.exp(-1.0 / g) / self.mass
            grad[inside] = (val[inside] * (-2.0 / (self.radius**2 * g * g)))[:, None] * diff[inside]
        return val, grad

    def support_mask(self, omega) -> np.ndarray:
        omega = np.atleast_2d(np.asarray(omega, dtype=float))
        return np.sum((omega - np.asarray(self.center)) ** 2, axis=1) < self.radius**2


def bump_eval(bump: BumpFunction, family: DemandFamily, x, q) -> tuple[np.ndarray, np.ndarray]:
    """psi_x(q) = psi(T_x^{-1} q) and its gradient in q."""
    bump.check_inside(family.reference_support)
    z = family.support_map_inverse(x, q)
    val, g = bump(z)
    A = family.support_map_A(x, z)
    return val, np.einsum("nki,nk->ni", A, g)


# -- target ----------------------------------------------------------------------
def _antisym_from_upper(vals, d: int) -> np.ndarray:
    C = np.zeros((d, d))
    iu = np.triu_indices(d, 1)
    C[iu] = vals
    return C - C.T


class SlutskyTarget:
    """Antisymmetric part C(x) of the target average Slutsky matrix."""

    def __init__(self, d: int = 2, constant=None, interpolator=None, source: str = "constant"):
        self.d = int(d)
        self._const = None
        if constant is not None:
            C = np.asarray(constant, dtype=float)
            if C.ndim == 0:
                if self.d != 2:
                    raise ConfigurationError("a scalar target needs d = 2")
                C = _antisym_from_upper([float(C)], 2)
            if C.shape != (self.d, self.d) or not np.allclose(C, -C.T, rtol=0, atol=0):
                raise ConfigurationError("target C must be an antisymmetric d x d matrix")
            self._const = C
        self._interp = interpolator
        self.source = source

    @classmethod
    def constant(cls, c12: float, d: int = 2) -> "SlutskyTarget":
        C = np.zeros((d, d))
        C[0, 1], C[1, 0] = c12, -c12
        return cls(d, constant=C, source=f"constant c12={c12!r}")

    @classmethod
    def from_csv(cls, path, d: int = 2) -> "SlutskyTarget":
        """Grid of C values: columns p1..pd, y, then the upper-triangle entries c_ij."""
        npair = d * (d - 1) // 2
        try:
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise ParseError(f"cannot read target file {path}: {exc}") from None
        if len(rows) < 2:
            raise ParseError(f"{path}: target file has no data rows")
        header = [h.strip() for h in rows[0]]
        if len(header) != d + 1 + npair:
            raise ParseError(f"{path}: expected {d + 1 + npair} columns, got {len(header)}")
        try:
            data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from None
        if not np.all(np.isfinite(data)):
            raise ParseError(f"{path}: non-finite values")
        axes = [np.unique(data[:, k]) for k in range(d + 1)]
        shape = tuple(len(a) for a in axes)
        if int(np.prod(shape)) != data.shape[0]:
            raise ParseError(f"{path}: rows do not form a complete lattice")
        vals = np.full(shape + (npair,), np.nan)
        idx = tuple(np.searchsorted(axes[k], data[:, k]) for k in range(d + 1))
        vals[idx] = data[:, d + 1 :]
        if np.any(np.isnan(vals)):
            raise ParseError(f"{path}: duplicate or missing lattice nodes")
        interp = RegularGridInterpolator(axes, vals, method="linear", bounds_error=True)
        return cls(d, interpolator=interp, source=str(path))

    def C(self, x) -> np.ndarray:
        if self._const is not None:
            return self._const.copy()
        if self._interp is None:
            return np.zeros((self.d, self.d))
        try:
            vals = self._interp(np.asarray(x, dtype=float)[None, :])[0]
        except ValueError:
            raise ConfigurationError(f"x={list(x)} outside the target grid") from None
        return _antisym_from_upper(vals, self.d)

    def S(self, x, T) -> np.ndarray:
        return 0.5 * np.asarray(T) + self.C(x)

    @property
    def is_zero(self) -> bool:
        return self._interp is None and (self._const is None or not np.any(self._const))


# -- coefficients ------------------------------------------------------------------
@dataclass
class RotationCoeffs:
    """a(x) after exact antisymmetrisation, with the raw estimate and its defect."""

    x: np.ndarray
    a: np.ndarray
    raw: np.ndarray
    se: np.ndarray
    defect: np.ndarray
    tolerance: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def consistent(self) -> bool:
        return bool(np.all(self.defect <= self.tolerance))

    def describe_defect(self) -> str:
        i, j = np.unravel_index(np.argmax(self.defect - self.tolerance), self.defect.shape)
        return (f"antisymmetry defect {self.defect[i, j]:.3e} at entry ({i + 1}, {j + 1}) exceeds "
                f"{DEFECT_SIGMAS} standard errors ({self.se[i, j]:.3e}) at x={np.asarray(self.x).tolist()}")


def identified_T(family: DemandFamily, x, h: float = 1e-3, n: int = 20000, seed: int = 0):
    """(T, D_p m) at x, from the moment oracle or CRN finite differences."""
    x = family.check_x(x)
    d = family.dim
    if family.has_moment_oracle:
        mo = family.moments(x)
        Dp = mo.dm[:, :d]
        dMy = mo.dM[:, :, d]
    else:
        from .identification import fd_moments

        mo = fd_moments(family, x, n, h, seed)
        Dp, dMy = mo.dm[:, :d], mo.dM[:, :, d]
    T = Dp + Dp.T + dMy
    return 0.5 * (T + T.T), Dp


def _coeffs_from_draws(family, target, x, q, v, Dp, T, floor):
    n = q.shape[0]
    e = v[:, :, None] * q[:, None, :]
    E = e.mean(axis=0)
    S = target.S(x, T)
    raw = S - Dp - E
    sym = e + np.swapaxes(e, 1, 2)
    se = sym.std(axis=0, ddof=1) / math.sqrt(n)
    # diagonal entries: sym holds 2 e_ii
    d = family.dim
    se[np.diag_indices(d)] *= 0.5
    defect = np.abs(raw + raw.T)
    defect[np.diag_indices(d)] *= 0.5
    a = 0.5 * (raw - raw.T)
    return RotationCoeffs(np.asarray(x), a, raw, se, defect, DEFECT_SIGMAS * se + floor)


def compute_coeffs(family: DemandFamily, target: SlutskyTarget, flow: CompositeFlow, x,
                   n: int = DEFAULT_COEFF_N, seed: int = 0, floor: float = ROUNDOFF_FLOOR,
                   strict: bool = True) -> RotationCoeffs:
    """Monte Carlo estimate of a(x) from the Step-1 flow."""
    x = family.check_x(x)
    base = flow.with_correction(None)
    omega = family.sample(family.x_ref, n, seed, STREAM_COEFFS)
    z = base.evaluate(x, omega)
    q = family.support_map(x, z)
    v = base.income_velocity(x, z)
    T, Dp = identified_T(family, x, seed=seed)
    co = _coeffs_from_draws(family, target, x, q, v, Dp, T, floor)
    if strict and not co.consistent:
        raise InconsistencyError(co.describe_defect())
    return co


def coefficient_path(family, target, flow: CompositeFlow, prefix, n=DEFAULT_COEFF_N, seed=0,
                     floor=ROUNDOFF_FLOOR, strict=True) -> list:
    """a(p, y) at every knot of the income leg for fixed prices ``prefix``.

    One set of reference draws is carried knot to knot along the Step-1
    income leg, so the whole path costs one flow evaluation.
    """
    base = flow.with_correction(None)
    d = family.dim
    yleg = base.base_leg(d, prefix)
    x0 = family.x_ref.copy()
    x0[:d] = prefix
    omega = family.sample(family.x_ref, n, seed, STREAM_COEFFS)
    z = base.evaluate(x0, omega)
    per_seg = max(1, -(-base.steps // (len(yleg.knots) - 1)))
    out = []
    prev = yleg.knots[0]
    for t in yleg.knots:
        if t != prev:
            z = leg_integrate(yleg, float(t), z, per_seg, t_start=float(prev))
        prev = t
        x = x0.copy()
        x[d] = t
        q = family.support_map(x, z)
        v = base.income_velocity(x, z)
        T, Dp = identified_T(family, x, seed=seed)
        co = _coeffs_from_draws(family, target, x, q, v, Dp, T, floor)
        if strict and not co.consistent:
            raise InconsistencyError(co.describe_defect())
        out.append(co)
    return out


# -- fields ----------------------------------------------------------------------------
def _reference_rotation(bump: BumpFunction, family: DemandFamily, x, a: np.ndarray,
                        z: np.ndarray) -> np.ndarray:
    """Rotation velocity pulled back to reference coordinates (d = 2).

    With A = DT^{-1} and J = |det DT|, the pulled-back field is
    A w(T z) = -(J / rho~) A a A^T grad_z(psi / J), and since A a A^T = det(A) a
    for 2x2 antisymmetric a this is  -(det A / rho~) a (grad psi - psi grad log J).
    Only points strictly inside the ball are touched; the field is exactly zero elsewhere.
    """
    a12 = float(a[0, 1])
    out = np.zeros_like(z)
    if a12 == 0.0:
        return out
    c0, c1 = bump.center
    inv_r2 = 1.0 / bump.radius**2
    s2 = ((z[:, 0] - c0) ** 2 + (z[:, 1] - c1) ** 2) * inv_r2
    idx = np.flatnonzero(s2 < 1.0 - _SHELL)
    if idx.size == 0:
        return out
    zl = z[idx]
    d0 = zl[:, 0] - c0
    d1 = zl[:, 1] - c1
    g = 1.0 - s2[idx]
    psi = np.exp(-1.0 / g) * (1.0 / bump.mass)
    coef = psi * (-2.0 * inv_r2) / (g * g)
    g0, g1 = coef * d0, coef * d1
    if not family.affine_support_map:
        lj = family.log_jacobian_grad(x, zl)
        g0 = g0 - psi * lj[:, 0]
        g1 = g1 - psi * lj[:, 1]
    rho = family.pullback_density(x, zl)
    if np.any(rho <= 0.0):
        raise ConfigurationError("bump ball leaves the support of the reference law")
    detA = np.exp(-family.log_jacobian(x, zl[:1]))[0] if family.affine_support_map else \
        np.exp(-family.log_jacobian(x, zl))
    factor = (-a12 * detA) / rho
    # a grad = (a12 g1, -a12 g0)
    out[idx, 0] = factor * g1
    out[idx, 1] = -factor * g0
    return out


def rotation_field(coeffs, bump: BumpFunction, family: DemandFamily, x, q) -> np.ndarray:
    """w_x(q) = -(1/rho_x(q)) a grad(phi_x)(q), phi_x = psi(T^{-1}q)/|det DT|."""
    a = coeffs.a if isinstance(coeffs, RotationCoeffs) else np.asarray(coeffs, dtype=float)
    q = np.atleast_2d(np.asarray(q, dtype=float))
    out = np.zeros_like(q)
    z = family.support_map_inverse(x, q)
    mask = bump.support_mask(z)
    if not np.any(mask) or not np.any(a):
        return out
    zb = z[mask]
    psi, g = bump(zb)
    g = g - psi[:, None] * family.log_jacobian_grad(x, zb)
    J = np.exp(family.log_jacobian(x, zb))
    A = family.support_map_A(x, zb)
    grad_phi = np.einsum("nki,nk->ni", A, g / J[:, None])
    rho = family.density(x, q[mask])
    out[mask] = -(grad_phi @ a.T) / rho[:, None]
    return out


def peak_rate(field_fn, knots, bump: BumpFunction, m: int = 41) -> float:
    """Largest Frobenius norm of the spatial derivative of ``field_fn(t, z)`` over the
    bump box and the knots (grid estimate)."""
    c, r = np.asarray(bump.center), bump.radius
    ax = np.linspace(-r, r, m)
    g1, g2 = np.meshgrid(c[0] + ax, c[1] + ax, indexing="ij")
    pts = np.column_stack([g1.ravel(), g2.ravel()])
    h = ax[1] - ax[0]
    best = 0.0
    for t in knots:
        w = field_fn(float(t), pts).reshape(m, m, 2)
        J = np.stack([np.stack(np.gradient(w[..., i], h, h), -1) for i in range(2)], -2)
        best = max(best, float(np.sqrt((J**2).sum((-2, -1))).max()))
    return best


class RotationCorrection:
    """Attachment that turns a Step-1 flow into one with average Slutsky S = T/2 + C."""

    def __init__(self, target: SlutskyTarget, radius_fraction: float = DEFAULT_RADIUS_FRACTION,
                 n: int = DEFAULT_COEFF_N, seed: int = 0, max_step: float = DEFAULT_MAX_STEP,
                 floor: float = ROUNDOFF_FLOOR, strict: bool = True, max_turn: float = DEFAULT_MAX_TURN):
        if n < 1000:
            raise ConfigurationError("coefficient sample size must be at least 1000")
        if not (max_step > 0 and max_turn > 0):
            raise ConfigurationError("corrected-leg step controls must be positive")
        self.target = target
        self.radius_fraction = float(radius_fraction)
        self.n = int(n)
        self.seed = int(seed)
        self.max_step = float(max_step)
        self.max_turn = float(max_turn)
        self.floor = float(floor)
        self.strict = strict
        self.paths = {}

    def bump(self, family: DemandFamily) -> BumpFunction:
        return BumpFunction.for_support(family.reference_support, self.radius_fraction)

    def modified_leg(self, flow: CompositeFlow, base: Leg, prefix) -> Leg:
        fam = flow.family
        bump = self.bump(fam)
        path = coefficient_path(fam, self.target, flow, prefix, self.n, self.seed, self.floor, self.strict)
        self.paths[tuple(float(p) for p in prefix)] = path
        A = np.stack([co.a for co in path])
        if not np.any(A):
            return base
        knots = base.knots
        x0 = fam.x_ref.copy()
        x0[: len(prefix)] = prefix
        def extra(t, z):
            k = int(min(max(np.searchsorted(knots, t, side="right") - 1, 0), len(knots) - 2))
            lam = min(max((t - knots[k]) / (knots[k + 1] - knots[k]), 0.0), 1.0)
            a = (1.0 - lam) * A[k] + lam * A[k + 1]
            x = x0.copy()
            x[-1] = t
            return _reference_rotation(bump, fam, x, a, z)

        rate = peak_rate(extra, knots, bump)
        step = min(self.max_step, self.max_turn / rate) if rate > 0 else self.max_step
        leg = Leg(base.coord, base.prefix, base.t0, base.t1, base.knots, base.fields, base.grid,
                  base.lipschitz, base.steps, extra, max_step=step)
        leg.diagnostics.update(base.diagnostics)
        leg.diagnostics.update(coefficients=A, rotation_rate=rate, max_step=step)
        return leg

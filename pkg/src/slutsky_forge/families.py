"""Cross-sectional demand distributions indexed by price and income.

A family describes the law mu_x of demand at every price-income pair
x = (p_1, ..., p_d, y) inside a rectangular box.  Each mu_x is carried by a
rectangular support that is the image of the reference support (the one at
the lower corner of the box) under a smooth support map T_x.

Two concrete families ship with the package:

``cd0``
    Cobb-Douglas demand q_i = y * eta_i / p_i with eta uniform on a square.
``tilt``
    A fixed-support exponential tilt in q_1 whose strength moves with both
    income and the first price.

Arrays of points always have shape ``(N, d)``; a single point is promoted.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.interpolate import RegularGridInterpolator

from .errors import ConfigurationError, DomainError, UnsupportedError

FD_STEP = 1e-4

# Integer tags for independent random streams derived from one user seed.
STREAM_REFERENCE = 0
STREAM_ORACLE = 1
STREAM_BASELINE = 2
STREAM_COEFFS = 3


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Generator for the stream ``keys`` derived from ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def _as_points(q, d):
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        q = q[None, :]
    if q.shape[-1] != d:
        raise ConfigurationError(f"expected points of dimension {d}, got shape {q.shape}")
    return q


@dataclass(frozen=True)
class PriceIncome:
    p: tuple
    y: float

    @classmethod
    def from_array(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(tuple(float(v) for v in x[:-1]), float(x[-1]))

    def as_array(self) -> np.ndarray:
        return np.array([*self.p, self.y], dtype=float)


@dataclass(frozen=True)
class BoxDomain:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi):
            raise ConfigurationError("box bounds have different lengths")
        if any(not a < b for a, b in zip(lo, hi)):
            raise ConfigurationError(f"degenerate box: lower={lo} upper={hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_sides(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def contains(self, q, tol: float = 0.0) -> np.ndarray:
        q = _as_points(q, self.dim)
        lo, hi = self.lo - tol, self.hi + tol
        out = (q[:, 0] >= lo[0]) & (q[:, 0] <= hi[0])
        for k in range(1, self.dim):
            out &= (q[:, k] >= lo[k]) & (q[:, k] <= hi[k])
        return out

    def corners(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lower, self.upper))))


@dataclass(frozen=True)
class Moments:
    """Mean, second moments and their derivatives in each coordinate of x.

    ``dm[i, k]`` is the derivative of m_i in x_k and ``dM[i, j, k]`` that of
    M_ij; the last x-coordinate is income.
    """

    m: np.ndarray
    M: np.ndarray
    dm: np.ndarray
    dM: np.ndarray


class DemandFamily:
    """Base class: a box of price-income pairs and a law of demand at each.

    Subclasses must set ``name``, ``dim``, ``domain`` (a BoxDomain of length
    dim + 1) and implement :meth:`density`, :meth:`support` and
    :meth:`sample`.  The support map defaults to the identity, which suits
    fixed-support families.
    """

    name = "family"
    dim = 2
    domain: BoxDomain
    density_floor = 1e-3
    # True when DT_x does not vary with omega, so log|det DT_x| has zero gradient
    affine_support_map = True

    # -- price-income box -------------------------------------------------
    @property
    def x_ref(self) -> np.ndarray:
        return self.domain.lo

    def check_x(self, x, tol: float = 1e-12) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape != (self.dim + 1,):
            raise DomainError(f"{self.name}: x must have {self.dim + 1} coordinates, got {x.shape[0]}")
        if not np.all(np.isfinite(x)):
            raise DomainError(f"{self.name}: non-finite x {x.tolist()}")
        lo, hi = self.domain.lo, self.domain.hi
        span = hi - lo
        if np.any(x < lo - tol * span) or np.any(x > hi + tol * span):
            raise DomainError(f"{self.name}: x={x.tolist()} outside box lower={lo.tolist()} upper={hi.tolist()}")
        return x

    # -- law of demand ------------------------------------------------------
    def support(self, x) -> BoxDomain:
        raise NotImplementedError

    @property
    def reference_support(self) -> BoxDomain:
        # keyed on the box so a replaced domain is picked up
        key, box = self.__dict__.get("_ref_support", (None, None))
        if key is not self.domain:
            box = self.support(self.x_ref)
            self.__dict__["_ref_support"] = (self.domain, box)
        return box

    def density(self, x, q) -> np.ndarray:
        raise NotImplementedError

    def sample(self, x, n: int, seed: int, stream: int = STREAM_ORACLE) -> np.ndarray:
        """Exact draws from mu_x; the same seed reuses the same uniforms."""
        raise NotImplementedError

    def reference_sample(self, n: int, seed: int) -> np.ndarray:
        if n < 1:
            raise ConfigurationError("sample size must be at least 1")
        return self.sample(self.x_ref, n, seed, STREAM_REFERENCE)

    def marginal_cdf(self, x, i: int, v) -> np.ndarray:
        raise UnsupportedError(f"{self.name}: no marginal CDF oracle")

    def moments(self, x) -> Moments:
        raise UnsupportedError(f"{self.name}: no closed-form moment oracle")

    @property
    def has_moment_oracle(self) -> bool:
        try:
            self.moments(self.x_ref)
        except UnsupportedError:
            return False
        return True

    # -- support map ----------------------------------------------------------
    def support_map(self, x, omega) -> np.ndarray:
        return _as_points(omega, self.dim).copy()

    def support_map_inverse(self, x, q) -> np.ndarray:
        return _as_points(q, self.dim).copy()

    def support_map_jacobian(self, x, omega) -> np.ndarray:
        omega = _as_points(omega, self.dim)
        return np.broadcast_to(np.eye(self.dim), (omega.shape[0], self.dim, self.dim)).copy()

    def support_map_A(self, x, omega) -> np.ndarray:
        return np.linalg.inv(self.support_map_jacobian(x, omega))

    def log_jacobian(self, x, omega) -> np.ndarray:
        _, logdet = np.linalg.slogdet(self.support_map_jacobian(x, omega))
        return logdet

    def log_jacobian_grad(self, x, omega) -> np.ndarray:
        """Gradient in omega of log|det DT_x|, by central differences."""
        omega = _as_points(omega, self.dim)
        out = np.empty_like(omega)
        h = FD_STEP * np.maximum(1.0, np.abs(omega))
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = 1.0
            hi = h[:, i : i + 1]
            out[:, i] = (
                self.log_jacobian(x, omega + hi * e) - self.log_jacobian(x, omega - hi * e)
            ) / (2 * hi[:, 0])
        return out

    def support_map_dx(self, x, omega, k: int) -> np.ndarray:
        """Derivative of T_x(omega) in the k-th coordinate of x."""
        x = np.asarray(x, dtype=float)
        h = FD_STEP * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        return (self.support_map(xp, omega) - self.support_map(xm, omega)) / (2 * h)

    # -- pulled-back law on the reference support -----------------------------
    def pullback_density(self, x, omega) -> np.ndarray:
        """Density of (T_x^{-1})_# mu_x on the reference support."""
        q = self.support_map(x, omega)
        return self.density(x, q) * np.exp(self.log_jacobian(x, omega))

    def pullback_density_dx(self, x, omega, k: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        h = FD_STEP * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        return (self.pullback_density(xp, omega) - self.pullback_density(xm, omega)) / (2 * h)

    # -- checks -----------------------------------------------------------------
    def budget_slack(self, x) -> float:
        """y minus the largest expenditure p.q over the support corners."""
        x = self.check_x(x)
        corners = self.support(x).corners()
        return float(x[-1] - np.max(corners @ x[:-1]))


class CobbDouglasUniform(DemandFamily):
    """q_i = y * eta_i / p_i with eta uniform on [eta_lo, eta_hi]^d."""

    name = "cd0"

    def __init__(self, eta_lo: float = 0.2, eta_hi: float = 0.4, dim: int = 2,
                 lower=(1.0, 1.0, 1.0), upper=(2.0, 2.0, 2.0)):
        if not 0 < eta_lo < eta_hi:
            raise ConfigurationError("need 0 < eta_lo < eta_hi")
        if dim * eta_hi >= 1:
            raise ConfigurationError("budget violated: dim * eta_hi must be < 1")
        self.dim = dim
        self.eta_lo = float(eta_lo)
        self.eta_hi = float(eta_hi)
        if len(lower) != dim + 1:
            lower = (1.0,) * (dim + 1)
            upper = (2.0,) * (dim + 1)
        self.domain = BoxDomain(lower, upper)
        width = self.eta_hi - self.eta_lo
        self._eta_density = width ** (-dim)
        self._mean = 0.5 * (self.eta_lo + self.eta_hi)
        self._var = width**2 / 12.0
        self.density_floor = 0.5 * self._eta_density

    def _scale(self, x):
        x = np.asarray(x, dtype=float)
        ref = self.x_ref
        return (x[-1] / ref[-1]) * (ref[:-1] / x[:-1])

    def support(self, x):
        x = self.check_x(x)
        lo_ref = self.eta_lo * self.x_ref[-1] / self.x_ref[:-1]
        hi_ref = self.eta_hi * self.x_ref[-1] / self.x_ref[:-1]
        s = self._scale(x)
        return BoxDomain(lo_ref * s, hi_ref * s)

    def density(self, x, q):
        x = self.check_x(x)
        q = _as_points(q, self.dim)
        inside = self.support(x).contains(q)
        value = self._eta_density * np.prod(x[:-1]) / x[-1] ** self.dim
        return np.where(inside, value, 0.0)

    def support_map(self, x, omega):
        return _as_points(omega, self.dim) * self._scale(x)

    def support_map_inverse(self, x, q):
        return _as_points(q, self.dim) / self._scale(x)

    def support_map_jacobian(self, x, omega):
        omega = _as_points(omega, self.dim)
        return np.broadcast_to(np.diag(self._scale(x)), (omega.shape[0], self.dim, self.dim)).copy()

    def support_map_A(self, x, omega):
        omega = _as_points(omega, self.dim)
        return np.broadcast_to(np.diag(1.0 / self._scale(x)), (omega.shape[0], self.dim, self.dim)).copy()

    def log_jacobian(self, x, omega):
        omega = _as_points(omega, self.dim)
        return np.full(omega.shape[0], np.sum(np.log(self._scale(x))))

    def log_jacobian_grad(self, x, omega):
        return np.zeros_like(_as_points(omega, self.dim))

    def support_map_dx(self, x, omega, k):
        x = np.asarray(x, dtype=float)
        q = self.support_map(x, omega)
        if k == self.dim:
            return q / x[-1]
        out = np.zeros_like(q)
        out[:, k] = -q[:, k] / x[k]
        return out

    def pullback_density(self, x, omega):
        omega = _as_points(omega, self.dim)
        inside = self.reference_support.contains(omega)
        return np.where(inside, self._eta_density, 0.0)

    def pullback_density_dx(self, x, omega, k):
        return np.zeros(_as_points(omega, self.dim).shape[0])

    def sample(self, x, n, seed, stream=STREAM_ORACLE):
        x = self.check_x(x)
        u = rng_for(seed, stream).random((int(n), self.dim))
        eta = self.eta_lo + (self.eta_hi - self.eta_lo) * u
        ref = self.x_ref
        omega = eta * ref[-1] / ref[:-1]
        return self.support_map(x, omega)

    def marginal_cdf(self, x, i, v):
        box = self.support(x)
        return np.clip((np.asarray(v, dtype=float) - box.lower[i]) / (box.upper[i] - box.lower[i]), 0.0, 1.0)

    def moments(self, x):
        x = self.check_x(x)
        d = self.dim
        p, y = x[:-1], x[-1]
        s = self._scale(x) * self.x_ref[-1] / self.x_ref[:-1]  # y / p_i for x_ref at ones
        m = self._mean * s
        E2 = np.full((d, d), self._mean**2) + np.eye(d) * self._var
        M = E2 * np.outer(s, s)
        dm = np.zeros((d, d + 1))
        dM = np.zeros((d, d, d + 1))
        for i in range(d):
            dm[i, i] = -m[i] / p[i]
            dm[i, d] = m[i] / y
            for j in range(d):
                dM[i, j, d] = 2 * M[i, j] / y
                dM[i, j, i] -= M[i, j] / p[i]
                dM[i, j, j] -= M[i, j] / p[j]
        return Moments(m, M, dm, dM)


def _log_x_over_sinh(s):
    """log(s / sinh(s)), accurate near zero."""
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < 1e-3
    safe = np.where(small, 1.0, s)
    return np.where(small, -(s**2) / 6.0 + s**4 / 180.0, np.log(safe / np.sinh(safe)))


def _langevin(s):
    """coth(s) - 1/s, accurate near zero."""
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < 1e-3
    safe = np.where(small, 1.0, s)
    return np.where(small, s / 3.0 - s**3 / 45.0, 1.0 / np.tanh(safe) - 1.0 / safe)


class ExponentialTilt(DemandFamily):
    """Fixed support [0.2, 0.4]^2; q_1 tilted by theta = kappa * (y - p_1).

    The q_1 density is theta * exp(theta (q_1 - c)) / (2 sinh(w theta)) with
    centre c = 0.3 and half-width w = 0.1; q_2 is uniform and independent.
    """

    name = "tilt"
    dim = 2

    def __init__(self, kappa: float = 5.0, lower=(1.0, 1.0, 1.0), upper=(1.2, 1.2, 1.2)):
        self.kappa = float(kappa)
        self.domain = BoxDomain(lower, upper)
        self.c, self.w = 0.3, 0.1
        self._support = BoxDomain((0.2, 0.2), (0.4, 0.4))
        thetas = self.kappa * np.array([
            self.domain.upper[-1] - self.domain.lower[0],
            self.domain.lower[-1] - self.domain.upper[0],
        ])
        worst = min(float(np.min(self._g1(np.array([0.2, 0.4]), t))) for t in thetas)
        self.density_floor = 0.5 * worst / (2 * self.w)

    def theta(self, x):
        x = np.asarray(x, dtype=float)
        return self.kappa * (x[-1] - x[0])

    def _log_g1(self, q1, theta):
        # log of theta e^{theta (q-c)} / (2 sinh(w theta)) = theta (q-c) + log(s/sinh s) - log(2w)
        return theta * (q1 - self.c) + _log_x_over_sinh(self.w * theta) - np.log(2 * self.w)

    def _g1(self, q1, theta):
        return np.exp(self._log_g1(q1, theta))

    def _dlog_g1(self, q1, theta):
        """Derivative of log g1 in theta."""
        return (q1 - self.c) - self.w * _langevin(self.w * theta)

    def support(self, x):
        self.check_x(x)
        return self._support

    def density(self, x, q):
        x = self.check_x(x)
        q = _as_points(q, 2)
        inside = self._support.contains(q)
        val = self._g1(q[:, 0], self.theta(x)) / (2 * self.w)
        return np.where(inside, val, 0.0)

    def pullback_density(self, x, omega):
        return self.density(x, omega)

    def pullback_density_dx(self, x, omega, k):
        x = self.check_x(x)
        omega = _as_points(omega, 2)
        dtheta = {0: -self.kappa, 2: self.kappa}.get(k, 0.0)
        if dtheta == 0.0:
            return np.zeros(omega.shape[0])
        return self.density(x, omega) * self._dlog_g1(omega[:, 0], self.theta(x)) * dtheta

    def log_jacobian_grad(self, x, omega):
        return np.zeros_like(_as_points(omega, 2))

    def support_map_dx(self, x, omega, k):
        return np.zeros_like(_as_points(omega, 2))

    def _q1_from_uniform(self, u, theta):
        a, span = self.c - self.w, 2 * self.w
        if abs(theta) < 1e-12:
            return a + span * u
        return a + np.log1p(u * np.expm1(span * theta)) / theta

    def sample(self, x, n, seed, stream=STREAM_ORACLE):
        x = self.check_x(x)
        u = rng_for(seed, stream).random((int(n), 2))
        q1 = self._q1_from_uniform(u[:, 0], self.theta(x))
        q2 = self.c - self.w + 2 * self.w * u[:, 1]
        return np.column_stack([q1, q2])

    def marginal_cdf(self, x, i, v):
        x = self.check_x(x)
        a, span = self.c - self.w, 2 * self.w
        v = np.clip(np.asarray(v, dtype=float), a, a + span)
        theta = self.theta(x)
        if i == 1 or abs(theta) < 1e-12:
            return (v - a) / span
        return np.expm1(theta * (v - a)) / np.expm1(theta * span)

    def _q1_integral(self, fn, theta):
        a, b = self.c - self.w, self.c + self.w
        val, _ = integrate.quad(lambda t: fn(t) * float(self._g1(t, theta)), a, b,
                                epsabs=1e-13, epsrel=1e-12, limit=200)
        return val

    def moments(self, x):
        """Moments by one-dimensional quadrature in q_1."""
        x = self.check_x(x)
        theta = float(self.theta(x))
        m1 = self._q1_integral(lambda t: t, theta)
        s1 = self._q1_integral(lambda t: t * t, theta)
        # theta-derivatives: exponential family, d E[f] / d theta = Cov(f, q_1)
        dm1 = self._q1_integral(lambda t: t * (t - m1), theta)
        ds1 = self._q1_integral(lambda t: t * t * (t - m1), theta)
        m2 = self.c
        s2 = self.c**2 + (2 * self.w) ** 2 / 12.0
        m = np.array([m1, m2])
        M = np.array([[s1, m1 * m2], [m1 * m2, s2]])
        dtheta = np.array([-self.kappa, 0.0, self.kappa])
        dm = np.zeros((2, 3))
        dm[0] = dm1 * dtheta
        dM = np.zeros((2, 2, 3))
        dM[0, 0] = ds1 * dtheta
        dM[0, 1] = dM[1, 0] = m2 * dm1 * dtheta
        return Moments(m, M, dm, dM)


class CallableFamily(DemandFamily):
    """Fixed-support family given by a density callable ``density_fn(x, q)``.

    Derivatives in x use central differences.  Sampling is by rejection
    against ``density_bound`` so draws are exact but not common-random-number
    smooth in x.
    """

    def __init__(self, name, lower, upper, support: BoxDomain, density_fn,
                 density_bound: float, density_floor: float = 1e-3, grid_points: int = 401):
        self.name = name
        self.domain = BoxDomain(lower, upper)
        self.dim = support.dim
        self._support = support
        self._fn = density_fn
        self.density_bound = float(density_bound)
        self.density_floor = float(density_floor)
        self._grid_points = grid_points

    def support(self, x):
        self.check_x(x)
        return self._support

    def density(self, x, q):
        x = np.asarray(x, dtype=float)
        q = _as_points(q, self.dim)
        inside = self._support.contains(q)
        return np.where(inside, self._fn(x, q), 0.0)

    def pullback_density(self, x, omega):
        return self.density(x, omega)

    def log_jacobian_grad(self, x, omega):
        return np.zeros_like(_as_points(omega, self.dim))

    def support_map_dx(self, x, omega, k):
        return np.zeros_like(_as_points(omega, self.dim))

    def sample(self, x, n, seed, stream=STREAM_ORACLE):
        x = self.check_x(x)
        rng = rng_for(seed, stream)
        lo, hi = self._support.lo, self._support.hi
        out, have = [], 0
        while have < n:
            batch = max(1024, 2 * (n - have))
            cand = lo + (hi - lo) * rng.random((batch, self.dim))
            keep = rng.random(batch) * self.density_bound < self.density(x, cand)
            out.append(cand[keep])
            have += int(keep.sum())
        return np.concatenate(out)[:n]

    def marginal_cdf(self, x, i, v):
        if self.dim != 2:
            raise UnsupportedError("numeric marginal CDF is implemented for d = 2")
        x = self.check_x(x)
        k = self._grid_points
        axes = [np.linspace(a, b, k) for a, b in zip(self._support.lower, self._support.upper)]
        g1, g2 = np.meshgrid(*axes, indexing="ij")
        rho = self.density(x, np.column_stack([g1.ravel(), g2.ravel()])).reshape(k, k)
        other = 1 - i
        marg = integrate.trapezoid(rho, axes[other], axis=other)
        cdf = integrate.cumulative_trapezoid(marg, axes[i], initial=0.0)
        cdf /= cdf[-1]
        return np.interp(np.asarray(v, dtype=float), axes[i], cdf)


class TabulatedFamily(CallableFamily):
    """Fixed-support family tabulated on an x-lattice times a q-grid.

    ``values`` has shape ``(*x_axes lengths, *q_axes lengths)``; evaluation is
    multilinear in all coordinates.
    """

    def __init__(self, name, x_axes, q_axes, values, density_floor: float = 1e-3):
        x_axes = [np.asarray(a, dtype=float) for a in x_axes]
        q_axes = [np.asarray(a, dtype=float) for a in q_axes]
        values = np.asarray(values, dtype=float)
        expected = tuple(len(a) for a in x_axes + q_axes)
        if values.shape != expected:
            raise ConfigurationError(f"tabulated values have shape {values.shape}, expected {expected}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ConfigurationError("tabulated densities must be finite and nonnegative")
        interp = RegularGridInterpolator(tuple(x_axes + q_axes), values, method="linear",
                                         bounds_error=False, fill_value=None)
        nx = len(x_axes)

        def fn(x, q):
            pts = np.column_stack([np.broadcast_to(np.asarray(x, dtype=float)[:nx], (q.shape[0], nx)), q])
            return interp(pts)

        support = BoxDomain([a[0] for a in q_axes], [a[-1] for a in q_axes])
        super().__init__(name, [a[0] for a in x_axes], [a[-1] for a in x_axes], support, fn,
                         density_bound=float(values.max()) * 1.0001, density_floor=density_floor)


BUILTIN_FAMILIES = {"cd0": CobbDouglasUniform, "tilt": ExponentialTilt}


def make_family(name: str, **overrides) -> DemandFamily:
    try:
        cls = BUILTIN_FAMILIES[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown family {name!r}; choose from {sorted(BUILTIN_FAMILIES)}") from None
    try:
        return cls(**overrides)
    except TypeError as exc:
        raise ConfigurationError(f"bad overrides for {name}: {exc}") from None


def family_density(f: DemandFamily, x, q) -> np.ndarray:
    f.check_x(x)
    return f.density(x, q)


def family_support(f: DemandFamily, x) -> BoxDomain:
    return f.support(x)


def moments_oracle(f: DemandFamily, x) -> Moments:
    return f.moments(x)

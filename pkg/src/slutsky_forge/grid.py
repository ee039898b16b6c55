"""Node-based fields on a uniform rectangular lattice."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .families import BoxDomain


def _is_pow2_plus_one(n: int) -> bool:
    m = n - 1
    return m > 0 and (m & (m - 1)) == 0


@dataclass(frozen=True)
class Grid2D:
    box: BoxDomain
    n: int

    def __post_init__(self):
        if self.box.dim != 2:
            raise ConfigurationError("Grid2D needs a two-dimensional box")
        if self.n < 17 or not _is_pow2_plus_one(self.n):
            raise ConfigurationError(f"grid size must be a power of two plus one and at least 17, got {self.n}")

    @property
    def h(self) -> np.ndarray:
        return (self.box.hi - self.box.lo) / (self.n - 1)

    @property
    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(np.linspace(a, b, self.n) for a, b in zip(self.box.lower, self.box.upper))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.n)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(*self.axes, indexing="ij")

    def points(self) -> np.ndarray:
        """All nodes as an (n*n, 2) array in C order."""
        x1, x2 = self.mesh()
        return np.column_stack([x1.ravel(), x2.ravel()])

    def trapezoid_weights(self) -> np.ndarray:
        w = np.ones(self.n)
        w[0] = w[-1] = 0.5
        return np.outer(w, w)

    def integrate(self, values: np.ndarray) -> float:
        h1, h2 = self.h
        return float(np.sum(self.trapezoid_weights() * values) * h1 * h2)

    def mean(self, values: np.ndarray) -> float:
        w = self.trapezoid_weights()
        return float(np.sum(w * values) / np.sum(w))


def bilinear(grid: Grid2D, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of node values; points outside are projected."""
    n = grid.n
    s = (points - grid.box.lo) / grid.h
    np.clip(s, 0.0, n - 1.0, out=s)
    i = np.minimum(s.astype(np.intp), n - 2)
    t = s - i
    flat = values.reshape(n * n, -1)
    k = i[:, 0] * n + i[:, 1]
    t0, t1 = t[:, 0:1], t[:, 1:2]
    v00 = flat[k]
    v01 = flat[k + 1]
    v10 = flat[k + n]
    v11 = flat[k + n + 1]
    out = (1 - t0) * ((1 - t1) * v00 + t1 * v01) + t0 * ((1 - t1) * v10 + t1 * v11)
    return out if values.ndim == 3 else out[:, 0]


@dataclass
class ScalarGridField:
    grid: Grid2D
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ConfigurationError(f"scalar field shape {self.values.shape} != grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("scalar field has non-finite values")

    def __call__(self, points) -> np.ndarray:
        return bilinear(self.grid, self.values, np.atleast_2d(np.asarray(points, dtype=float)))

    @classmethod
    def from_function(cls, grid: Grid2D, fn) -> "ScalarGridField":
        return cls(grid, fn(grid.points()).reshape(grid.shape))


@dataclass
class VectorGridField:
    grid: Grid2D
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (*self.grid.shape, 2):
            raise ConfigurationError(f"vector field shape {self.values.shape} != grid {self.grid.shape} x 2")
        if not np.all(np.isfinite(self.values)):
            raise ConfigurationError("vector field has non-finite values")

    def __call__(self, points) -> np.ndarray:
        return bilinear(self.grid, self.values, np.atleast_2d(np.asarray(points, dtype=float)))

    def jacobian(self) -> np.ndarray:
        """Nodewise 2x2 derivative, shape (n, n, 2, 2), entry [.., i, k] = d v_i / d x_k."""
        h1, h2 = self.grid.h
        out = np.empty((*self.grid.shape, 2, 2))
        for i in range(2):
            g1, g2 = np.gradient(self.values[..., i], h1, h2, edge_order=2)
            out[..., i, 0] = g1
            out[..., i, 1] = g2
        return out

    def max_jacobian_norm(self) -> float:
        """Grid maximum of the Frobenius norm of the derivative."""
        return float(np.max(np.sqrt(np.sum(self.jacobian() ** 2, axis=(-2, -1)))))

    def boundary_normal_max(self) -> float:
        v = self.values
        return float(max(np.abs(v[0, :, 0]).max(), np.abs(v[-1, :, 0]).max(),
                         np.abs(v[:, 0, 1]).max(), np.abs(v[:, -1, 1]).max()))


def grad_field(u: ScalarGridField) -> VectorGridField:
    """Central differences inside, second-order one-sided on the boundary."""
    h1, h2 = u.grid.h
    g1, g2 = np.gradient(u.values, h1, h2, edge_order=2)
    out = VectorGridField(u.grid, np.stack([g1, g2], axis=-1))
    out.meta["boundary_normal_max"] = out.boundary_normal_max()
    return out

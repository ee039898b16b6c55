"""Pure-Neumann elliptic problems on a rectangle.

Solves  div(A grad u) = -f  with zero conormal flux and zero mean, using a
node-based finite-difference discretisation assembled from a discrete energy

    sum over edges  a_kk (difference quotient)^2   (diagonal part)
  + sum over cells  2 a_12 g_1 g_2                 (cross part)

so that the stiffness matrix K is symmetric positive semidefinite with the
constants as its kernel.  For diagonal A the rows reproduce the classical
5-point stencil with ghost-node reflection at the boundary, scaled by the
trapezoid weights W.  The discrete operator is L u = -K u / (W h1 h2), which
is symmetric in the trapezoid inner product.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import CompatibilityError, ConfigurationError, NumericError
from .families import BoxDomain
from .grid import Grid2D, ScalarGridField

DEFAULT_N = 65
DEFAULT_TOL = 1e-8


@dataclass
class EllipticProblem:
    """div(A grad u) = -f on ``grid`` with zero conormal flux.

    ``coefficient`` is None (identity), a constant 2x2 matrix, or an array of
    shape (n, n, 2, 2).
    """

    grid: Grid2D
    rhs: np.ndarray
    coefficient: np.ndarray | None = None

    def __post_init__(self):
        self.rhs = np.asarray(self.rhs, dtype=float)
        if self.rhs.shape != self.grid.shape:
            raise ConfigurationError(f"rhs shape {self.rhs.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.rhs)):
            raise ConfigurationError("rhs has non-finite values")
        if self.coefficient is not None:
            A = np.asarray(self.coefficient, dtype=float)
            if A.shape == (2, 2):
                A = np.broadcast_to(A, (*self.grid.shape, 2, 2))
            if A.shape != (*self.grid.shape, 2, 2):
                raise ConfigurationError(f"coefficient must be 2x2 or (n, n, 2, 2), got {A.shape}")
            if not np.allclose(A, np.swapaxes(A, -1, -2), rtol=0, atol=1e-12):
                raise ConfigurationError("coefficient matrix is not symmetric")
            eig = np.linalg.eigvalsh(A)
            if eig.min() < 1e-6 or eig.max() > 1e6:
                raise ConfigurationError(
                    f"coefficient eigenvalues must lie in [1e-6, 1e6], got [{eig.min():.3g}, {eig.max():.3g}]")
            self.coefficient = np.ascontiguousarray(A)


def _assemble(grid: Grid2D, A: np.ndarray | None) -> sparse.csr_matrix:
    n = grid.n
    h1, h2 = grid.h
    idx = np.arange(n * n).reshape(n, n)
    rows, cols, data = [], [], []

    def add_edges(ka, kb, c):
        rows.extend([ka, ka, kb, kb])
        cols.extend([ka, kb, ka, kb])
        data.extend([c, -c, -c, c])

    edge_w = np.ones(n)
    edge_w[0] = edge_w[-1] = 0.5
    # edges along x1: nodes (i, j) - (i + 1, j)
    a11 = 1.0 if A is None else 0.5 * (A[:-1, :, 0, 0] + A[1:, :, 0, 0])
    c1 = a11 * (h2 / h1) * edge_w[None, :] * np.ones((n - 1, n))
    add_edges(idx[:-1, :].ravel(), idx[1:, :].ravel(), c1.ravel())
    a22 = 1.0 if A is None else 0.5 * (A[:, :-1, 1, 1] + A[:, 1:, 1, 1])
    c2 = a22 * (h1 / h2) * edge_w[:, None] * np.ones((n, n - 1))
    add_edges(idx[:, :-1].ravel(), idx[:, 1:].ravel(), c2.ravel())

    if A is not None and np.any(A[..., 0, 1] != 0.0):
        a12 = 0.25 * (A[:-1, :-1, 0, 1] + A[1:, :-1, 0, 1] + A[:-1, 1:, 0, 1] + A[1:, 1:, 0, 1]).ravel()
        corners = [idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()]
        alpha = np.array([-1.0, 1.0, -1.0, 1.0]) / (2 * h1)
        beta = np.array([-1.0, -1.0, 1.0, 1.0]) / (2 * h2)
        block = (np.outer(alpha, beta) + np.outer(beta, alpha)) * h1 * h2
        for r in range(4):
            for s in range(4):
                if block[r, s] != 0.0:
                    rows.append(corners[r])
                    cols.append(corners[s])
                    data.append(a12 * block[r, s])

    K = sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n)
    )
    return K.tocsr()


@functools.lru_cache(maxsize=16)
def _identity_operator(box: BoxDomain, n: int) -> sparse.csr_matrix:
    return _assemble(Grid2D(box, n), None)


def stiffness(problem: EllipticProblem) -> sparse.csr_matrix:
    if problem.coefficient is None:
        return _identity_operator(problem.grid.box, problem.grid.n)
    return _assemble(problem.grid, problem.coefficient)


def apply_operator(problem: EllipticProblem, u: np.ndarray) -> np.ndarray:
    """L u = div(A grad u) in the discrete sense, nodewise."""
    g = problem.grid
    h1, h2 = g.h
    K = stiffness(problem)
    return -(K @ np.asarray(u, dtype=float).ravel()).reshape(g.shape) / (g.trapezoid_weights() * h1 * h2)


def boundary_flux(problem: EllipticProblem, u: np.ndarray) -> float:
    """Largest discrete conormal flux density leaving through the boundary.

    With ghost-node reflection the flux condition lives in the boundary rows
    of the system; their residual per unit face length is the flux mismatch.
    """
    g = problem.grid
    h1, h2 = g.h
    f = problem.rhs - g.mean(problem.rhs)
    r = (g.trapezoid_weights() * f * h1 * h2).ravel() - stiffness(problem) @ u.ravel()
    r = r.reshape(g.shape)
    edges = [np.abs(r[0, :]) / h2, np.abs(r[-1, :]) / h2, np.abs(r[:, 0]) / h1, np.abs(r[:, -1]) / h1]
    return float(max(e.max() for e in edges))


@dataclass
class SolveInfo:
    iterations: int
    residual: float
    rhs_mean: float
    converged: bool
    notes: list = field(default_factory=list)


def solve_neumann(problem: EllipticProblem, tol: float = DEFAULT_TOL) -> ScalarGridField:
    """Jacobi-preconditioned conjugate gradients in the mean-zero subspace.

    Returns a field with ``meta['info']`` (a :class:`SolveInfo`).  Raises
    :class:`CompatibilityError` if the rhs mean is not negligible and
    :class:`NumericError` if CG does not converge in 10 n^2 iterations.
    """
    if not 0 < tol <= 1e-3:
        raise ConfigurationError(f"tolerance must lie in (0, 1e-3], got {tol}")
    g = problem.grid
    h1, h2 = g.h
    W = g.trapezoid_weights()
    f = problem.rhs
    fmax = float(np.max(np.abs(f)))
    fmean = g.mean(f)
    if fmax == 0.0:
        out = ScalarGridField(g, np.zeros(g.shape))
        out.meta["info"] = SolveInfo(0, 0.0, 0.0, True)
        return out
    if abs(fmean) > 1e-3 * fmax:
        raise CompatibilityError(
            f"Neumann data has mean {fmean:.3e} against max {fmax:.3e}; mass is not conserved")
    f = f - fmean
    fnorm = float(np.linalg.norm(f))
    K = stiffness(problem)
    Wf = W.ravel()
    b = Wf * f.ravel() * h1 * h2
    Minv = 1.0 / K.diagonal()
    scale = h1 * h2 * fnorm

    x = np.zeros_like(b)
    r = b.copy()
    z = Minv * r
    p = z.copy()
    rz = r @ z
    maxiter = 10 * g.n * g.n
    it = 0
    res = np.linalg.norm(r / Wf) / scale
    while res > tol:
        if it >= maxiter:
            raise NumericError(f"CG did not converge in {maxiter} iterations (residual {res:.3e})")
        Kp = K @ p
        alpha = rz / (p @ Kp)
        x += alpha * p
        r -= alpha * Kp
        r -= r.mean()
        z = Minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
        res = np.linalg.norm(r / Wf) / scale
    u = x.reshape(g.shape)
    u = u - g.mean(u)
    true_res = float(np.linalg.norm((b - K @ u.ravel()) / Wf) / scale)
    out = ScalarGridField(g, u)
    out.meta["info"] = SolveInfo(it, true_res, fmean, True)
    return out


def manufactured_cosine(n: int, coefficient=None, box: BoxDomain | None = None):
    """u* = cos(pi x1) cos(pi x2) on the unit square with matching rhs.

    Only diagonal coefficients keep u* flux-free on the boundary.

    Returns ``(problem, exact_values)``.
    """
    box = box or BoxDomain((0.0, 0.0), (1.0, 1.0))
    g = Grid2D(box, n)
    x1, x2 = g.mesh()
    exact = np.cos(math.pi * x1) * np.cos(math.pi * x2)
    A = np.eye(2) if coefficient is None else np.asarray(coefficient, dtype=float)
    rhs = (A[0, 0] + A[1, 1]) * math.pi**2 * exact
    return EllipticProblem(g, rhs, None if coefficient is None else A), exact


def manufactured_variable(n: int, box: BoxDomain | None = None):
    """u* = cos(pi x1) cos(2 pi x2) with A = diag(1 + x1 x2, 2 + x1) on the unit square.

    u* is not an eigenfunction of the discrete operator, so CG does real work.
    Returns ``(problem, exact_values)``.
    """
    box = box or BoxDomain((0.0, 0.0), (1.0, 1.0))
    g = Grid2D(box, n)
    x1, x2 = g.mesh()
    pi = math.pi
    c2 = np.cos(2 * pi * x2)
    exact = np.cos(pi * x1) * c2
    A = np.zeros((*g.shape, 2, 2))
    A[..., 0, 0] = 1.0 + x1 * x2
    A[..., 1, 1] = 2.0 + x1
    div = -x2 * pi * np.sin(pi * x1) * c2 - ((1.0 + x1 * x2) + 4.0 * (2.0 + x1)) * pi**2 * exact
    return EllipticProblem(g, -div, A), exact


@dataclass
class ConvergenceReport:
    sizes: list
    errors: list
    order: float
    exact: bool

    def as_dict(self):
        return {"sizes": self.sizes, "errors": self.errors,
                "order": None if self.exact else self.order, "exact": self.exact}


def convergence_check(generator, sizes, tol: float = DEFAULT_TOL) -> ConvergenceReport:
    """Observed order: least-squares slope of log L-inf error against log h.

    ``generator(n)`` returns ``(problem, exact_values)``.  If every error is
    at roundoff level the order is reported as NaN with ``exact=True``.
    """
    sizes = [int(n) for n in sizes]
    if len(sizes) < 3:
        raise ConfigurationError(f"insufficient sizes: need at least 3 grid sizes, got {sizes}")
    errors, hs = [], []
    for n in sizes:
        problem, exact = generator(n)
        u = solve_neumann(problem, tol)
        errors.append(float(np.max(np.abs(u.values - (exact - problem.grid.mean(exact))))))
        hs.append(float(problem.grid.h[0]))
    if max(errors) <= 1e-13:
        return ConvergenceReport(sizes, errors, float("nan"), True)
    slope = np.polyfit(np.log(hs), np.log(errors), 1)[0]
    return ConvergenceReport(sizes, errors, float(slope), False)

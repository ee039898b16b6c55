"""What the cross-sectional laws pin down, and what they do not.

From the family alone one recovers the mean m(x), the second moments M(x)
and the symmetric matrix

    T_ij(x) = d/dp_i m_j + d/dp_j m_i + d/dy M_ij.

The average Slutsky matrix of a constructed random demand function is only
restricted by S + S^T = T; its antisymmetric part is free.  The
nonidentification demo builds two systems with the same laws and different
antisymmetric parts and measures both.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist

from .errors import ConfigurationError, UnsupportedError
from .families import STREAM_BASELINE, STREAM_ORACLE, DemandFamily, Moments
from .transport import CompositeFlow, fd_derivative, flow_jacobian_fd

DEFAULT_N = 20000
DEFAULT_H = 1e-3
KS_REFERENCE = 0.02
KS_REFERENCE_N = 20000
ENERGY_FACTOR = 2.0
ENERGY_MAX_N = 5000
ENERGY_BLOCKS = 4
ENERGY_BASELINE_PAIRS = 8
SE_SIGMAS = 4.0
ABS_TOL = 1e-2


@dataclass
class IdentifiedFunctionals:
    x: np.ndarray
    m: np.ndarray
    M: np.ndarray
    T: np.ndarray
    m_se: np.ndarray
    M_se: np.ndarray
    T_se: np.ndarray
    h: float
    method: str
    schemes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"x": self.x.tolist(), "m": self.m.tolist(), "M": self.M.tolist(), "T": self.T.tolist(),
                "m_se": self.m_se.tolist(), "M_se": self.M_se.tolist(), "T_se": self.T_se.tolist(),
                "h": self.h, "method": self.method, "schemes": list(self.schemes)}


@dataclass
class SlutskyEstimate:
    x: np.ndarray
    S: np.ndarray
    se: np.ndarray
    asymmetry: float  # mean of S_12 - S_21 per draw
    asymmetry_se: float
    n: int
    h_p: float
    h_y: float
    schemes: list = field(default_factory=list)
    sym_se: np.ndarray | None = None  # SE of S_ij + S_ji per draw

    def __post_init__(self):
        if self.n < 1000:
            raise ConfigurationError(f"average Slutsky estimates need n >= 1000, got {self.n}")
        if not np.all(np.isfinite(self.S)):
            raise ConfigurationError("non-finite Slutsky estimate")

    def as_dict(self) -> dict:
        return {"x": self.x.tolist(), "S_hat": self.S.tolist(), "S_se": self.se.tolist(),
                "asymmetry": self.asymmetry, "asymmetry_se": self.asymmetry_se, "n": self.n,
                "h_p": self.h_p, "h_y": self.h_y, "schemes": list(self.schemes)}


@dataclass
class MarginalDistanceReport:
    x: np.ndarray
    ks: list
    ks_threshold: float
    energy: float
    energy_baseline: float
    energy_factor: float
    n: int
    energy_n: int
    ks_two_sample: list = field(default_factory=list)

    def __post_init__(self):
        if min(self.ks, default=0.0) < 0 or self.energy < -1e-12:
            raise ConfigurationError("distance statistics must be nonnegative")

    @property
    def ks_pass(self) -> bool:
        return bool(max(self.ks) <= self.ks_threshold)

    @property
    def energy_pass(self) -> bool:
        return bool(self.energy <= self.energy_factor * self.energy_baseline)

    @property
    def passed(self) -> bool:
        return self.ks_pass and self.energy_pass

    def as_dict(self) -> dict:
        return {"x": self.x.tolist(), "ks": list(self.ks), "ks_two_sample": list(self.ks_two_sample),
                "ks_threshold": self.ks_threshold, "energy": self.energy,
                "energy_baseline": self.energy_baseline, "energy_factor": self.energy_factor,
                "n": self.n, "energy_n": self.energy_n, "pass": self.passed}


# -- identified functionals ----------------------------------------------------------
def _per_draw_derivatives(family: DemandFamily, x, n: int, h: float, seed: int):
    """Per-draw demand q and CRN finite-difference derivatives of q and q q^T."""
    lo, hi = family.domain.lo, family.domain.hi
    d = family.dim
    q = family.sample(x, n, seed)
    dq, dqq, schemes = [], [], []
    for k in range(d + 1):
        D, s = fd_derivative(lambda xs: family.sample(xs, n, seed), x, k, h, lo, hi)
        Dqq, _ = fd_derivative(
            lambda xs: (lambda qs: qs[:, :, None] * qs[:, None, :])(family.sample(xs, n, seed)), x, k, h, lo, hi)
        dq.append(D)
        dqq.append(Dqq)
        schemes.append(s)
    return q, np.stack(dq, axis=-1), np.stack(dqq, axis=-1), schemes


def fd_moments(family: DemandFamily, x, n: int = DEFAULT_N, h: float = DEFAULT_H, seed: int = 0) -> Moments:
    """Monte Carlo moments and CRN central-difference gradients."""
    x = family.check_x(x)
    q, dq, dqq, _ = _per_draw_derivatives(family, x, n, h, seed)
    return Moments(q.mean(0), (q[:, :, None] * q[:, None, :]).mean(0), dq.mean(0), dqq.mean(0))


def estimate_functionals(family: DemandFamily, x, n: int = DEFAULT_N, h: float = DEFAULT_H, seed: int = 0,
                         method: str = "mc") -> IdentifiedFunctionals:
    """m, M and T at x.

    ``method="mc"`` draws from mu_x with common random numbers across the
    finite-difference evaluations and reports Monte Carlo standard errors;
    ``method="oracle"`` uses the family's closed-form or quadrature moments.
    """
    x = family.check_x(x)
    d = family.dim
    if method == "oracle":
        mo = family.moments(x)
        Dp = mo.dm[:, :d]
        T = Dp + Dp.T + mo.dM[:, :, d]
        z = np.zeros((d, d))
        return IdentifiedFunctionals(x, mo.m, mo.M, 0.5 * (T + T.T), np.zeros(d), z, z.copy(), 0.0, "oracle")
    if method != "mc":
        raise ConfigurationError(f"unknown method {method!r}; use 'mc' or 'oracle'")
    if n < 1000:
        raise ConfigurationError(f"n must be at least 1000, got {n}")
    q, dq, dqq, schemes = _per_draw_derivatives(family, x, n, h, seed)
    qq = q[:, :, None] * q[:, None, :]
    # per-draw T_ij = d_{p_i} q_j + d_{p_j} q_i + d_y (q_i q_j)
    Dp = dq[:, :, :d]  # [n, j, i] = d q_j / d p_i
    t = np.swapaxes(Dp, 1, 2) + Dp + dqq[:, :, :, d]
    t = 0.5 * (t + np.swapaxes(t, 1, 2))
    rn = math.sqrt(n)
    return IdentifiedFunctionals(x, q.mean(0), qq.mean(0), t.mean(0), q.std(0, ddof=1) / rn,
                                 qq.std(0, ddof=1) / rn, t.std(0, ddof=1) / rn, h, "mc", schemes)


def per_draw_slutsky(flow: CompositeFlow, x, omega, h_p: float = DEFAULT_H, h_y: float = DEFAULT_H):
    J = flow_jacobian_fd(flow, x, omega, h_p, h_y)
    return J.Dp + J.Dy[:, :, None] * J.phi[:, None, :], J


def estimate_average_slutsky(flow: CompositeFlow, family: DemandFamily, x, n: int = DEFAULT_N,
                             h: float = DEFAULT_H, seed: int = 0, h_y: float | None = None) -> SlutskyEstimate:
    """Monte Carlo mean of D_p Phi + D_y Phi Phi^T over reference draws."""
    x = family.check_x(x)
    omega = family.reference_sample(n, seed)
    s, J = per_draw_slutsky(flow, x, omega, h, h if h_y is None else h_y)
    rn = math.sqrt(n)
    diff = s[:, 0, 1] - s[:, 1, 0] if family.dim >= 2 else np.zeros(n)
    sym = s + np.swapaxes(s, 1, 2)
    return SlutskyEstimate(x, s.mean(0), s.std(0, ddof=1) / rn, float(diff.mean()),
                           float(diff.std(ddof=1) / rn), n, J.h_p, J.h_y, J.schemes,
                           sym.std(0, ddof=1) / rn)


def half_step_check(flow: CompositeFlow, family: DemandFamily, est: SlutskyEstimate, seed: int = 0) -> dict:
    """Re-estimate at half the FD steps on the same draws.

    For the second-order central scheme the truncation error of ``est`` is
    about 4/3 of the reported difference.
    """
    half = estimate_average_slutsky(flow, family, est.x, est.n, 0.5 * est.h_p, seed, 0.5 * est.h_y)
    diff = est.S - half.S
    return {"h_p": half.h_p, "h_y": half.h_y, "S_hat": half.S.tolist(), "difference": diff.tolist(),
            "max_abs_difference": float(np.max(np.abs(diff)))}


# -- marginal distances -----------------------------------------------------------------
def ks_threshold(n: int) -> float:
    """0.02 at n = 2e4, scaled like the KS null distribution (1/sqrt(n))."""
    return KS_REFERENCE * math.sqrt(KS_REFERENCE_N / n)


def _mean_distance(a: np.ndarray, b: np.ndarray, rows: int = 500) -> float:
    # row blocks keep the distance matrix small enough to be recycled by the allocator
    total = sum(float(cdist(a[i : i + rows], b).sum()) for i in range(0, len(a), rows))
    return total / (len(a) * len(b))


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """V-statistic energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'|."""
    ab = _mean_distance(a, b)
    aa = _mean_distance(a, a)
    bb = _mean_distance(b, b)
    return float(max(2 * ab - aa - bb, 0.0))


def sample_distance(a: np.ndarray, b: np.ndarray) -> tuple[list, float]:
    """Per-coordinate two-sample KS and block energy distance between two samples."""
    ks = [float(stats.ks_2samp(a[:, i], b[:, i]).statistic) for i in range(a.shape[1])]
    return ks, block_energy(a, b)


@functools.lru_cache(maxsize=64)
def _energy_baseline(family: DemandFamily, x: tuple, m: int, seed: int) -> float:
    vals = [energy_distance(family.sample(x, m, seed, 100 * STREAM_BASELINE + 2 * k),
                            family.sample(x, m, seed, 100 * STREAM_BASELINE + 2 * k + 1))
            for k in range(ENERGY_BASELINE_PAIRS)]
    return float(np.mean(vals))


def block_energy(a: np.ndarray, b: np.ndarray, m: int = ENERGY_MAX_N, blocks: int = ENERGY_BLOCKS) -> float:
    """Energy distance averaged over disjoint blocks of at most m points."""
    m = min(m, len(a), len(b))
    k = max(1, min(blocks, len(a) // m, len(b) // m))
    return float(np.mean([energy_distance(a[i * m : (i + 1) * m], b[i * m : (i + 1) * m]) for i in range(k)]))


def marginal_distance(flow: CompositeFlow, family: DemandFamily, x, n: int = DEFAULT_N, seed: int = 0,
                      *, skip_final: bool = False, threshold: float | None = None,
                      energy_factor: float = ENERGY_FACTOR) -> MarginalDistanceReport:
    """Distances between the pushforward at x and the law mu_x.

    KS is one-sample against the family's marginal CDF when it has one and
    two-sample against an oracle draw otherwise.  The energy distance is
    averaged over up to four disjoint blocks of at most 5000 points and
    compared with the mean over eight pairs of independent oracle samples of
    the block size; a single block has a heavy right tail.
    """
    x = family.check_x(x)
    pushed = flow(x, family.reference_sample(n, seed), skip_final=skip_final)
    oracle = family.sample(x, n, seed, STREAM_ORACLE)
    ks2 = [float(stats.ks_2samp(pushed[:, i], oracle[:, i]).statistic) for i in range(family.dim)]
    try:
        ks = [float(stats.kstest(pushed[:, i], lambda v, i=i: family.marginal_cdf(x, i, v)).statistic)
              for i in range(family.dim)]
    except UnsupportedError:
        ks = ks2
    m = min(n, ENERGY_MAX_N)
    energy = block_energy(pushed, oracle, m)
    baseline = _energy_baseline(family, tuple(float(v) for v in x), m, int(seed))
    return MarginalDistanceReport(x, ks, ks_threshold(n) if threshold is None else threshold, energy,
                                  baseline, energy_factor, n, m, ks2)


# -- nonidentification ---------------------------------------------------------------------
def _within(value, target, se, sigmas=SE_SIGMAS, floor=ABS_TOL) -> bool:
    return bool(abs(value - target) <= max(sigmas * se, floor))


def nonid_point(base: CompositeFlow, corrected: CompositeFlow, family: DemandFamily, c: float, x,
                n: int, seed: int, h: float = DEFAULT_H, marginal_n: int = DEFAULT_N) -> dict:
    """All checks of the demonstration at one test point."""
    x = family.check_x(x)
    T = estimate_functionals(family, x, n, h, seed)
    out = {"x": x.tolist(), "T_hat": T.T.tolist(), "T_se": T.T_se.tolist(), "systems": {}}
    ok = True
    for label, flow, target in (("symmetric", base, 0.0), ("asymmetric", corrected, 2 * c)):
        md = marginal_distance(flow, family, x, marginal_n, seed)
        S = estimate_average_slutsky(flow, family, x, n, h, seed)
        asym_ok = _within(S.asymmetry, target, S.asymmetry_se)
        d = family.dim
        ident = np.zeros((d, d), dtype=bool)
        for i in range(d):
            for j in range(d):
                err = S.S[i, j] + S.S[j, i] - T.T[i, j]
                se = math.hypot(S.sym_se[i, j], T.T_se[i, j])
                ident[i, j] = abs(err) <= max(SE_SIGMAS * se, ABS_TOL)
        checks = {"marginals": md.passed, "asymmetry": asym_ok, "identified_set": bool(ident.all())}
        ok &= all(checks.values())
        out["systems"][label] = {"c12": c if label == "asymmetric" else 0.0, "target_asymmetry": target,
                                 "marginals": md.as_dict(), "slutsky": S.as_dict(), "checks": checks}
    out["pass"] = bool(ok)
    return out


def nonid_demo(family: DemandFamily, c: float, test_x, n: int = 50000, seed: int = 0, *,
               base: CompositeFlow | None = None, correction=None, h: float = DEFAULT_H,
               marginal_n: int = DEFAULT_N, mapper=map) -> dict:
    """Two observationally equivalent systems with average Slutsky asymmetry 0 and 2c."""
    from .rotation import RotationCorrection, SlutskyTarget

    if family.dim != 2:
        raise ConfigurationError("the demonstration is implemented for d = 2")
    if abs(c) > 0.1:
        raise ConfigurationError(f"|c| must not exceed 0.1 for stable legs, got {c}")
    base = base or CompositeFlow(family)
    if c == 0.0:
        corrected = base
    else:
        corrected = base.with_correction(correction or RotationCorrection(SlutskyTarget.constant(c), seed=seed))
    points = list(mapper(lambda x: nonid_point(base, corrected, family, c, x, n, seed, h, marginal_n), test_x))
    failing = [p["x"] for p in points if not p["pass"]]
    return {"family": family.name, "c": c, "n": n, "seed": seed, "points": points,
            "failing": failing, "pass": not failing}

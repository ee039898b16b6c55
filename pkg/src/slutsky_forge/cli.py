"""Command-line entry point: ``slutsky-forge <command> [options]``.

Every command resolves a RunConfig from defaults, an optional JSON config
file and command-line flags (flags win), validates it, runs, and writes a
JSON report that embeds the resolved config and the package version.

Exit codes: 0 pass, 1 a check failed, 2 usage or configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import __version__
from .elliptic import DEFAULT_TOL, convergence_check, manufactured_cosine
from .errors import CheckFailed, ConfigurationError, ForgeError
from .families import make_family
from .identification import (estimate_average_slutsky, estimate_functionals, half_step_check,
                             marginal_distance, nonid_demo)
from .rotation import (DEFAULT_COEFF_N, DEFAULT_MAX_STEP, DEFAULT_MAX_TURN, DEFAULT_RADIUS_FRACTION,
                       RotationCorrection, SlutskyTarget)
from .symmetry import ElasticityBounds, grid_test, lattice_axes, moments_ingest
from .transport import CompositeFlow

SOLVER_MAX_TOL = 1e-3
# where results go, not what is computed; kept out of the embedded config
_OUTPUT_FIELDS = ("out", "samples", "intervals")
_FLOAT = "%.17g"

# Test points: near the lower income bound for CD0, where the corrected
# income leg turns slowly enough for stable finite differences.
TEST_POINTS = {
    "cd0": [(1.0, 1.0, 1.0), (1.1, 1.05, 1.03), (1.05, 1.2, 1.05), (1.2, 1.1, 1.04), (1.15, 1.15, 1.05)],
    "tilt": [(1.1, 1.1, 1.15), (1.0, 1.2, 1.1), (1.2, 1.0, 1.05), (1.05, 1.15, 1.2), (1.15, 1.05, 1.0)],
}
MARGINAL_POINTS = {
    "cd0": [(1.5, 1.2, 1.2), (1.0, 1.0, 1.3), (1.8, 1.3, 1.1), (1.2, 1.9, 1.25), (2.0, 2.0, 1.15)],
    "tilt": TEST_POINTS["tilt"],
}


@dataclass
class RunConfig:
    family: str = "cd0"
    family_overrides: dict = field(default_factory=dict)
    grid_n: int = 65
    knots: int = 9
    steps: int = 64
    n: int = 20000
    h_p: float = 1e-3
    h_y: float = 1e-3
    seed: int = 0
    x: list | None = None
    target_c: float | None = None
    target_file: str | None = None
    radius_fraction: float = DEFAULT_RADIUS_FRACTION
    max_step: float = DEFAULT_MAX_STEP
    max_turn: float = DEFAULT_MAX_TURN
    coeff_n: int = DEFAULT_COEFF_N
    c: float = 0.05
    lower: float = 1.0
    upper: float = 1.0
    lower_per_good: list | None = None
    upper_per_good: list | None = None
    lattice: list = field(default_factory=lambda: [4])
    slack: float = 0.0
    moments: str | None = None
    sizes: list = field(default_factory=lambda: [33, 65, 129])
    tol: float = DEFAULT_TOL
    negative_control: bool = True
    out: str | None = None
    samples: str | None = None
    intervals: str | None = None

    def validate(self) -> None:
        def positive(name, v):
            if not v > 0:
                raise ConfigurationError(f"{name} must be positive, got {v}")

        for name in ("h_p", "h_y", "tol", "radius_fraction", "max_step", "max_turn"):
            positive(name, getattr(self, name))
        if self.grid_n < 17 or (self.grid_n - 1) & (self.grid_n - 2):
            raise ConfigurationError(f"grid_n must be 2^k + 1 >= 17, got {self.grid_n}")
        if self.knots < 9:
            raise ConfigurationError(f"knots must be at least 9, got {self.knots}")
        positive("steps", self.steps)
        if self.n < 1000:
            raise ConfigurationError(f"n must be at least 1000, got {self.n}")
        if self.coeff_n < 1000:
            raise ConfigurationError(f"coeff_n must be at least 1000, got {self.coeff_n}")
        if self.target_c is not None and self.target_file is not None:
            raise ConfigurationError("give at most one of target_c and target_file")
        if self.lower > self.upper:
            raise ConfigurationError("lower elasticity bound exceeds upper bound")
        if self.slack < 0:
            raise ConfigurationError("slack must be nonnegative")
        if abs(self.c) > 0.1:
            raise ConfigurationError(f"|c| must not exceed 0.1, got {self.c}")

    def family_obj(self):
        return make_family(self.family, **self.family_overrides)

    def points(self, default: dict) -> list:
        fam = self.family_obj()
        pts = self.x if self.x is not None else default.get(fam.name, [tuple(fam.x_ref)])
        return [tuple(float(v) for v in fam.check_x(p)) for p in pts]

    def target(self, d: int):
        if self.target_file is not None:
            return SlutskyTarget.from_csv(self.target_file, d)
        if self.target_c is not None:
            return SlutskyTarget.constant(self.target_c, d)
        return None

    def flow(self, family, target=None):
        base = CompositeFlow(family, self.grid_n, self.knots, self.steps)
        if target is None:
            return base
        return base.with_correction(self.correction(target))

    def correction(self, target) -> RotationCorrection:
        return RotationCorrection(target, self.radius_fraction, self.coeff_n, self.seed, self.max_step,
                                  max_turn=self.max_turn)


# -- argument parsing ------------------------------------------------------------------------
def _parse_x(text: str) -> list:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if all("=" in p for p in parts):
        kv = dict(p.split("=", 1) for p in parts)
        keys = sorted((k for k in kv if k.startswith("p")), key=lambda k: int(k[1:]))
        if "y" not in kv or [f"p{i + 1}" for i in range(len(keys))] != keys:
            raise argparse.ArgumentTypeError(f"x must look like p1=..,p2=..,y=.., got {text!r}")
        return [float(kv[k]) for k in keys] + [float(kv["y"])]
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse x {text!r}") from None


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigurationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="slutsky-forge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, flow=True, target=False):
        sp.add_argument("--config", help="JSON file with RunConfig fields")
        sp.add_argument("--out", help="JSON report path (default: stdout)")
        sp.add_argument("--seed", type=int)
        if flow:
            sp.add_argument("--family")
            sp.add_argument("--x", type=_parse_x, action="append", help="p1=..,p2=..,y=.. (repeatable)")
            sp.add_argument("--n", type=int)
            sp.add_argument("--grid-n", type=int, dest="grid_n")
            sp.add_argument("--knots", type=int)
            sp.add_argument("--steps", type=int)
            sp.add_argument("--h-p", type=float, dest="h_p")
            sp.add_argument("--h-y", type=float, dest="h_y")
        if target:
            sp.add_argument("--target-c", type=float, dest="target_c")
            sp.add_argument("--target-file", dest="target_file")
            sp.add_argument("--radius-fraction", type=float, dest="radius_fraction")
            sp.add_argument("--max-step", type=float, dest="max_step")
            sp.add_argument("--max-turn", type=float, dest="max_turn")
            sp.add_argument("--coeff-n", type=int, dest="coeff_n")

    sp = sub.add_parser("poisson-check", help="manufactured-solution convergence of the Neumann solver")
    common(sp, flow=False)
    sp.add_argument("--sizes", type=_ints)
    sp.add_argument("--tol", type=float)

    sp = sub.add_parser("synth", help="push reference draws to one x and dump them")
    common(sp, target=True)
    sp.add_argument("--samples", help="CSV path for the pushed sample")

    sp = sub.add_parser("verify-marginals", help="KS and energy distances of pushforwards")
    common(sp, target=True)
    sp.add_argument("--no-negative-control", dest="negative_control", action="store_const", const=False)

    sp = sub.add_parser("slutsky", help="identified T and average Slutsky matrix of a constructed flow")
    common(sp, target=True)

    sp = sub.add_parser("nonid-demo", help="two observationally equivalent systems with different Slutsky")
    common(sp, target=False)
    sp.add_argument("--c", type=float)
    sp.add_argument("--radius-fraction", type=float, dest="radius_fraction")
    sp.add_argument("--max-step", type=float, dest="max_step")
    sp.add_argument("--max-turn", type=float, dest="max_turn")
    sp.add_argument("--coeff-n", type=int, dest="coeff_n")

    sp = sub.add_parser("sym-test", help="elasticity-bound asymmetry intervals on a lattice")
    common(sp, flow=False)
    sp.add_argument("--family")
    sp.add_argument("--moments", help="moment lattice CSV instead of a family")
    sp.add_argument("--lower", type=float)
    sp.add_argument("--upper", type=float)
    sp.add_argument("--lower-per-good", type=_floats, dest="lower_per_good")
    sp.add_argument("--upper-per-good", type=_floats, dest="upper_per_good")
    sp.add_argument("--lattice", type=_ints, help="nodes per axis, one value or one per axis")
    sp.add_argument("--slack", type=float)
    sp.add_argument("--intervals", help="CSV path for the interval rows")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    values = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot load config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        values.update(loaded)
    for name in known:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    cfg.validate()
    return cfg


# -- output ------------------------------------------------------------------------------
class _Outputs:
    """Atomic file writes; everything written is removed if the command fails."""

    def __init__(self):
        self.done = []

    def write(self, path: str, writer) -> None:
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
        os.close(fd)
        try:
            writer(tmp)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.done.append(path)

    def rollback(self) -> None:
        for path in self.done:
            if os.path.exists(path):
                os.unlink(path)
        self.done = []


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=2, sort_keys=True, allow_nan=True) + "\n"


def _mapper():
    try:
        threads = int(os.environ.get("SLUTSKY_FORGE_THREADS", "1"))
    except ValueError:
        raise ConfigurationError("SLUTSKY_FORGE_THREADS must be an integer") from None
    if threads <= 1:
        return map, None
    pool = ThreadPoolExecutor(max_workers=threads)
    return pool.map, pool


# -- commands -----------------------------------------------------------------------------
def cmd_poisson_check(cfg: RunConfig, out: _Outputs) -> tuple[dict, bool]:
    notes = []
    tol = cfg.tol
    loose = tol > SOLVER_MAX_TOL
    if loose:
        notes.append(f"requested tolerance {tol!r} exceeds the solver maximum {SOLVER_MAX_TOL!r}; "
                     f"solved at {SOLVER_MAX_TOL!r}")
        tol = SOLVER_MAX_TOL
    rep = convergence_check(manufactured_cosine, cfg.sizes, tol)
    ok = rep.exact or 1.8 <= rep.order <= 2.2
    return {"convergence": rep.as_dict(), "tol": cfg.tol, "solver_tol": tol, "loose_tolerance": loose,
            "notes": notes, "pass": bool(ok)}, ok


def cmd_synth(cfg: RunConfig, out: _Outputs) -> tuple[dict, bool]:
    fam = cfg.family_obj()
    pts = cfg.points({})
    if len(pts) != 1:
        raise ConfigurationError("synth needs exactly one --x")
    x = pts[0]
    flow = cfg.flow(fam, cfg.target(fam.dim))
    info = {}
    q = flow(x, fam.reference_sample(cfg.n, cfg.seed), info=info)
    md = marginal_distance(flow, fam, x, cfg.n, cfg.seed)
    box = fam.support(x)
    if cfg.samples:
        def write(path):
            with open(path, "w") as fh:
                fh.write(",".join(f"q{k + 1}" for k in range(fam.dim)) + "\n")
                for row in q:
                    fh.write(",".join(_FLOAT % v for v in row) + "\n")

        out.write(cfg.samples, write)
    inside = bool(np.all(box.contains(q, tol=1e-9)))
    budget = bool(np.all(q @ np.asarray(x[:-1]) < x[-1]))
    ok = md.ks_pass and inside and budget
    return {"x": list(x), "family": fam.name, "n": cfg.n, "seed": cfg.seed,
            "support": {"lower": list(box.lower), "upper": list(box.upper)}, "inside_support": inside,
            "budget_feasible": budget, "ks": md.ks, "ks_threshold": md.ks_threshold,
            "clamp": info, "corrected": flow.correction is not None, "pass": ok}, ok


def cmd_verify_marginals(cfg: RunConfig, out: _Outputs) -> tuple[dict, bool]:
    fam = cfg.family_obj()
    pts = cfg.points(MARGINAL_POINTS)
    target = cfg.target(fam.dim)
    flows = {"step1": cfg.flow(fam)}
    if target is not None:
        flows["corrected"] = flows["step1"].with_correction(cfg.correction(target))
    mapper, pool = _mapper()
    try:
        def one(x):
            rec = {"x": list(x), "family": fam.name, "n": cfg.n, "seed": cfg.seed}
            for label, flow in flows.items():
                rec[label] = marginal_distance(flow, fam, x, cfg.n, cfg.seed).as_dict()
            if cfg.negative_control and x[-1] != fam.x_ref[-1]:
                neg = marginal_distance(flows["step1"], fam, x, cfg.n, cfg.seed, skip_final=True)
                rec["negative_control"] = {"ks": neg.ks, "detected": bool(max(neg.ks) > 0.1)}
            rec["pass"] = all(rec[k]["pass"] for k in flows)
            return rec

        records = list(mapper(one, pts))
    finally:
        if pool is not None:
            pool.shutdown()
    ok = all(r["pass"] for r in records)
    return {"points": records, "pass": ok}, ok


def cmd_slutsky(cfg: RunConfig, out: _Outputs) -> tuple[dict, bool]:
    from .identification import ABS_TOL, SE_SIGMAS

    fam = cfg.family_obj()
    pts = cfg.points(TEST_POINTS)
    flow = cfg.flow(fam, cfg.target(fam.dim))
    mapper, pool = _mapper()
    try:
        def one(x):
            T = estimate_functionals(fam, x, cfg.n, cfg.h_p, cfg.seed)
            S = estimate_average_slutsky(flow, fam, x, cfg.n, cfg.h_p, cfg.seed, cfg.h_y)
            err = S.S + S.S.T - T.T
            tol = np.maximum(SE_SIGMAS * np.hypot(S.sym_se, T.T_se), ABS_TOL)
            rec = {"x": list(x), "family": fam.name, "n": cfg.n, "seed": cfg.seed, "T": T.T, "T_se": T.T_se,
                   "S_hat": S.S, "S_se": S.se, "asymmetry": S.asymmetry, "asymmetry_se": S.asymmetry_se,
                   "fd_schemes": S.schemes, "half_step": half_step_check(flow, fam, S, cfg.seed),
                   "identified_set_error": err, "pass": bool(np.all(np.abs(err) <= tol))}
            if fam.has_moment_oracle:
                rec["T_oracle"] = estimate_functionals(fam, x, method="oracle").T
            return rec

        records = list(mapper(one, pts))
    finally:
        if pool is not None:
            pool.shutdown()
    ok = all(r["pass"] for r in records)
    return {"points": records, "corrected": flow.correction is not None, "pass": ok}, ok


def cmd_nonid_demo(cfg: RunConfig, out: _Outputs) -> tuple[dict, bool]:
    fam = cfg.family_obj()
    pts = cfg.points(TEST_POINTS)
    base = cfg.flow(fam)
    corr = cfg.correction(SlutskyTarget.constant(cfg.c, fam.dim))
    mapper, pool = _mapper()
    try:
        rep = nonid_demo(fam, cfg.c, pts, cfg.n, cfg.seed, base=base, correction=corr, h=cfg.h_p, mapper=mapper)
    finally:
        if pool is not None:
            pool.shutdown()
    records = []
    for p in rep["points"]:
        sy = p["systems"]
        records.append({
            "x": p["x"], "family": fam.name, "n": cfg.n, "seed": cfg.seed, "T": p["T_hat"], "T_se": p["T_se"],
            "S_hat": {k: v["slutsky"]["S_hat"] for k, v in sy.items()},
            "S_se": {k: v["slutsky"]["S_se"] for k, v in sy.items()},
            "asymmetry": {k: v["slutsky"]["asymmetry"] for k, v in sy.items()},
            "asymmetry_se": {k: v["slutsky"]["asymmetry_se"] for k, v in sy.items()},
            "ks": {k: v["marginals"]["ks"] for k, v in sy.items()},
            "energy": {k: {"value": v["marginals"]["energy"], "baseline": v["marginals"]["energy_baseline"]}
                       for k, v in sy.items()},
            "checks": {k: v["checks"] for k, v in sy.items()},
            "pass": p["pass"]})
    failing = [f"{k} system at x={r['x']}: {', '.join(c for c, v in r['checks'][k].items() if not v)}"
               for r in records for k in r["checks"] if not all(r["checks"][k].values())]
    return {"c": cfg.c, "points": records, "failing_sections": failing, "pass": rep["pass"]}, rep["pass"]


def cmd_sym_test(cfg: RunConfig, out: _Outputs) -> tuple[dict, bool]:
    if (cfg.lower_per_good is None) != (cfg.upper_per_good is None):
        raise ConfigurationError("give both per-good bound lists or neither")
    if cfg.lower_per_good is not None:
        bounds = ElasticityBounds(cfg.lower_per_good, cfg.upper_per_good, per_good=True)
    else:
        bounds = ElasticityBounds(cfg.lower, cfg.upper)
    if cfg.moments:
        source = moments_ingest(cfg.moments)
        rep = grid_test(source, bounds, slack=cfg.slack)
    else:
        fam = cfg.family_obj()
        rep = grid_test(fam, bounds, lattice_axes(fam, cfg.lattice if len(cfg.lattice) > 1 else cfg.lattice[0]),
                        cfg.slack)
    if cfg.intervals:
        out.write(cfg.intervals, rep.write_csv)
    summary = rep.summary()
    summary["pass"] = rep.passed
    return summary, rep.passed


COMMANDS = {
    "poisson-check": cmd_poisson_check,
    "synth": cmd_synth,
    "verify-marginals": cmd_verify_marginals,
    "slutsky": cmd_slutsky,
    "nonid-demo": cmd_nonid_demo,
    "sym-test": cmd_sym_test,
}


def main(argv=None) -> int:
    out = _Outputs()
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        cfg = resolve_config(args)
        report, ok = COMMANDS[command](cfg, out)
        resolved = {k: v for k, v in asdict(cfg).items() if k not in _OUTPUT_FIELDS}
        report = {"command": command, "version": __version__, "config": resolved, **report}
        text = dumps(report)
        if cfg.out:
            def write(path):
                with open(path, "w") as fh:
                    fh.write(text)

            out.write(cfg.out, write)
        else:
            sys.stdout.write(text)
        if not ok:
            raise CheckFailed(f"{command}: check failed")
        return 0
    except CheckFailed as exc:
        sys.stderr.write(f"{exc}\n")
        return exc.exit_code
    except ForgeError as exc:
        out.rollback()
        sys.stderr.write(dumps({"command": command, "version": __version__,
                                "error": {"type": type(exc).__name__, "message": str(exc),
                                          "exit_code": exc.exit_code}}))
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        out.rollback()
        sys.stderr.write(dumps({"command": command, "version": __version__,
                                "error": {"type": type(exc).__name__, "message": str(exc), "exit_code": 3}}))
        return 3


if __name__ == "__main__":
    sys.exit(main())

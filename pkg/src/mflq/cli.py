"""Command-line front end.

Subcommands: analyze, simulate, solve-bsde, solve-hamiltonian, optimize,
verify, example31.  Every run writes its CSVs (17 significant digits) and a
``manifest.json`` with the resolved configuration, versions, stage timings
and SHA-256 digests of the emitted files into the output directory.

Exit codes: 0 success, 1 numerical failure, 2 usage or parse error,
3 precondition or window violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
import warnings
from contextlib import contextmanager, nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .errors import MFLQError, NumericalError, ProblemFileError

FLOAT_FMT = "%.17g"
DEFAULT_OUT_ENV = "MFLQ_OUTPUT_DIR"
MODES = {"exact-mean": "exact", "empirical": "empirical"}


class UsageError(ProblemFileError):
    """Invalid command-line configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"usage error: {message}")


# ---------------------------------------------------------------------------
# Run bookkeeping
# ---------------------------------------------------------------------------

class RunRecorder:
    """Collects emitted files and stage timings and writes the manifest."""

    def __init__(self, out: Path, command: str, config: dict):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config = config
        self.files: list[Path] = []
        self.timings: dict[str, float] = {}
        self.t0 = time.perf_counter()

    @contextmanager
    def stage(self, name: str):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t

    def csv(self, name: str, columns: list[str], data: np.ndarray) -> Path:
        path = self.out / name
        data = np.asarray(data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.shape[1] != len(columns):
            raise ValueError(f"{name}: {len(columns)} columns but data has {data.shape[1]}")
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(columns) + "\n")
            np.savetxt(fh, data, fmt=FLOAT_FMT, delimiter=",")
        self.files.append(path)
        return path

    def json(self, name: str, doc) -> Path:
        path = self.out / name
        path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
        self.files.append(path)
        return path

    def npy(self, name: str, arr: np.ndarray) -> Path:
        path = self.out / name
        np.save(path, arr)
        self.files.append(path)
        return path

    def finish(self, status: int) -> Path:
        from .kernels import BACKEND

        doc = {
            "command": self.command,
            "config": self.config,
            "status": status,
            "versions": {"mflq": __version__, "numpy": np.__version__,
                         "python": platform.python_version(), "kernel_backend": BACKEND},
            "wall_clock_seconds": time.perf_counter() - self.t0,
            "stage_seconds": self.timings,
            "files": {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in self.files},
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _load_spec(args):
    from .model import TimeGrid, load_problem

    spec = load_problem(args.problem)
    g = spec.grid
    if args.dt is not None or args.T is not None:
        T = g.T if args.T is None else args.T
        dt = g.dt if args.dt is None else args.dt
        try:
            spec = spec.with_grid(TimeGrid(g.t0, T, dt))
        except ValueError as exc:
            raise UsageError(f"invalid grid override: {exc}") from exc
    if args.K is not None:
        spec = spec.with_K(args.K)
    return spec


def _validate(args) -> None:
    for name in ("dt", "T", "tol", "alpha_step", "damping"):
        v = getattr(args, name, None)
        if v is not None and not (np.isfinite(v) and v > 0):
            raise UsageError(f"--{name.replace('_', '-')} must be a positive number, got {v}")
    if getattr(args, "damping", None) is not None and args.damping > 1:
        raise UsageError(f"--damping must lie in (0, 1], got {args.damping}")
    if getattr(args, "alpha_step", None) is not None and args.alpha_step > 1:
        raise UsageError(f"--alpha-step must lie in (0, 1], got {args.alpha_step}")
    if getattr(args, "K", None) is not None and not np.isfinite(args.K):
        raise UsageError("--K must be finite")
    if getattr(args, "paths", None) is not None and args.paths < 1:
        raise UsageError(f"--paths must be at least 1, got {args.paths}")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        raise UsageError(f"--threads must be at least 1, got {args.threads}")


def _continuation_kw(args) -> dict:
    kw = {}
    if args.alpha_step is not None:
        kw["delta0"] = args.alpha_step
    if args.damping is not None:
        kw["damping"] = args.damping
    if args.tol is not None:
        kw["tol"] = args.tol
    return kw


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _labels(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i + 1}" for i in range(n)]


def _rms(arr: np.ndarray) -> np.ndarray:
    """sqrt(E|a(s)|^2) over all trailing axes, per grid point."""
    M, G = arr.shape[:2]
    if arr.size == 0:
        return np.zeros(G)
    return np.sqrt(np.mean(np.sum(arr.reshape(M, G, -1) ** 2, axis=2), axis=0))


def _rms_rho(arr: np.ndarray, weights: np.ndarray) -> np.ndarray:
    if arr.shape[2] == 0:
        return np.zeros(arr.shape[1])
    return np.sqrt(np.einsum("mgpi,mgpi,p->g", arr, arr, weights) / arr.shape[0])


def _solution_table(sol, grid, weights):
    n = sol.x.shape[2]
    cols = ["s"] + _labels("mean_x", n) + _labels("mean_y", n) + ["rms_x", "rms_y", "rms_z", "rms_k"]
    data = np.column_stack([grid.points, sol.x_mean, sol.y_mean, _rms(sol.x), _rms(sol.y),
                            _rms(sol.z), _rms_rho(sol.k, weights)])
    return cols, data


def _log_table(state):
    rows = state.log_rows()
    cols = ["alpha", "delta", "iterations", "rhat", "residual", "damping"]
    data = np.array([[r[c] for c in cols] for r in rows], dtype=float).reshape(-1, len(cols))
    return cols, data


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_analyze(args, rec: RunRecorder) -> int:
    from .spectral import admissible_windows

    spec = _load_spec(args)
    with rec.stage("analyze"):
        rep = admissible_windows(spec, k_hat=args.k_hat)
    print(rep.text())
    rec.json("analyze.json", rep.to_dict())
    return 0


def cmd_simulate(args, rec: RunRecorder) -> int:
    from .forward import NoiseBank, simulate_mfsde
    from .model import ControlProcess

    spec = _load_spec(args)
    bank = NoiseBank.for_spec(spec, args.seed, args.paths)
    with rec.stage("simulate"):
        ens = simulate_mfsde(spec, bank, ControlProcess.zero(args.paths, spec.grid, spec.m),
                             mode=MODES[args.mode])
    g = spec.grid
    x = ens.states
    K = spec.K
    energy = np.mean(np.sum(x * x, axis=2), axis=0) * np.exp(2 * K * g.points)
    qs = sorted(args.quantiles)
    bands = np.quantile(x, qs, axis=0)  # (q, G, n)
    cols = ["s"] + _labels("mean_x", spec.n) + ["weighted_sq"]
    parts = [g.points, ens.mean_track, energy]
    for q, band in zip(qs, bands):
        cols += [f"q{q:g}_x{i + 1}" for i in range(spec.n)]
        parts.append(band)
    rec.csv("simulate.csv", cols, np.column_stack(parts))
    if args.save_paths:
        rec.npy("paths.npy", x)
    print(f"simulated {args.paths} paths on {g.size} grid points; "
          f"E|x(T)e^(KT)|^2 = {energy[-1]:.6g}")
    return 0


def cmd_solve_bsde(args, rec: RunRecorder) -> int:
    from .backward import check_bsde_estimate, noise_state, solve_mfbsde
    from .forward import NoiseBank, simulate_mfsde
    from .model import ControlProcess, apply_track

    spec = _load_spec(args)
    K = spec.K
    g = spec.grid
    bank = NoiseBank.for_spec(spec, args.seed, args.paths)
    with rec.stage("driver"):
        if args.driver is not None:
            c = np.asarray(args.driver, dtype=float)
            if c.shape != (spec.n,):
                raise UsageError(f"--driver needs {spec.n} values, got {c.size}")
            f = np.broadcast_to(c, (g.size, spec.n)).copy()
            f_mean = None
            state = noise_state(bank)
        else:
            # adjoint driver of the uncontrolled state
            ens = simulate_mfsde(spec, bank, ControlProcess.zero(args.paths, g, spec.m),
                                 mode=MODES[args.mode])
            x, xm = ens.states, ens.mean_track
            f_mean = np.einsum("gij,gj->gi", spec.cost.combined("Q", 2), xm)
            f = apply_track(spec.cost.Q, x - xm) + f_mean
            ns = noise_state(bank)
            state = np.concatenate([x, ns], axis=2) if ns is not None and ns.shape[2] else x
    with rec.stage("solve"):
        sol = solve_mfbsde(spec, f, K, bank, state=state, f_mean=f_mean)
    with rec.stage("estimate"):
        rep = check_bsde_estimate(spec, sol, f, K)
    cols = ["s"] + _labels("mean_y", spec.n) + ["rms_z", "rms_k"]
    rec.csv("bsde.csv", cols, np.column_stack([g.points, sol.y_mean, _rms(sol.z),
                                               _rms_rho(sol.k, spec.marks.atom_weight)]))
    rec.json("bsde_estimate.json", rep.to_dict())
    print(f"y(t0) mean = {np.array2string(sol.y_mean[0], precision=6)}; "
          f"estimate {'holds' if rep.passed else 'VIOLATED'} (lhs {rep.lhs:.4g}, rhs {rep.rhs:.4g})")
    return 0


def _solve_target(spec, transform: str):
    from .hamiltonian import eliminate_cross_terms

    if transform == "auto" and spec.cost.has_cross_terms():
        ts = eliminate_cross_terms(spec)
        return ts.spec, ts
    return spec, None


def cmd_solve_hamiltonian(args, rec: RunRecorder) -> int:
    from .forward import NoiseBank
    from .hamiltonian import continuation_solve, fbsde_residual

    spec = _load_spec(args)
    target, ts = _solve_target(spec, args.transform)
    bank = NoiseBank.for_spec(target, args.seed, args.paths)
    with rec.stage("continuation"):
        sol, state = continuation_solve(target, bank, K=target.K, mode=MODES[args.mode],
                                        **_continuation_kw(args))
    with rec.stage("residual"):
        res = fbsde_residual(target, sol)
    cols, data = _solution_table(sol, target.grid, target.marks.atom_weight)
    rec.csv("hamiltonian.csv", cols, data)
    cols, data = _log_table(state)
    rec.csv("continuation_log.csv", cols, data)
    rec.json("hamiltonian.json", {"transformed": ts is not None, "residual": res.__dict__,
                                  "levels": len(state.log_rows()), "max_rhat": state.max_rhat})
    print(f"continuation reached alpha=1 in {len(state.log_rows())} levels "
          f"(max rhat {state.max_rhat:.3f}); residuals forward {res.forward:.2e}, "
          f"backward {res.backward:.2e}")
    return 0


def _write_optimize(rec: RunRecorder, res, extra_cols=(), extra=()):
    spec = res.spec
    g = spec.grid
    u = res.control
    cols = (["s"] + _labels("mean_x", spec.n) + _labels("mean_u", spec.m)
            + ["rms_x", "rms_u", "rms_y", "rms_z"] + list(extra_cols))
    parts = [g.points, res.ensemble.mean_track, u.mean, _rms(res.ensemble.states), _rms(u.paths),
             _rms(res.solution.y), _rms(res.solution.z)] + list(extra)
    rec.csv("optimize.csv", cols, np.column_stack(parts))
    cols, data = _log_table(res.state)
    rec.csv("continuation_log.csv", cols, data)
    rec.json("optimality.json", {"transformed": res.transformed is not None,
                                 **res.report.to_dict()})


def cmd_optimize(args, rec: RunRecorder) -> int:
    from .control import optimize
    from .forward import NoiseBank

    spec = _load_spec(args)
    bank = NoiseBank.for_spec(spec, args.seed, args.paths)
    with rec.stage("optimize"):
        res = optimize(spec, bank, transform=args.transform, mode=MODES[args.mode],
                       num_probes=args.probes, probe_seed=args.seed, **_continuation_kw(args))
    _write_optimize(rec, res)
    r = res.report
    print(f"J(u*) = {r.cost:.10g}; stationarity residual {r.stationarity_relative:.2e} (relative); "
          f"expansion identity error {r.expansion_error:.2e}")
    return 0


def cmd_example31(args, rec: RunRecorder) -> int:
    from .control import example31_oracle, optimize
    from .forward import NoiseBank
    from .model import TimeGrid

    T = 20.0 if args.T is None else args.T
    dt = 1e-3 if args.dt is None else args.dt
    try:
        grid = TimeGrid(0.0, T, dt)
    except ValueError as exc:
        raise UsageError(f"invalid grid: {exc}") from exc
    ex = example31_oracle(args.rho, args.a, args.x0, grid)
    spec = ex.spec if args.K is None else ex.spec.with_K(args.K)
    bank = NoiseBank.for_spec(spec, args.seed, args.paths)
    with rec.stage("optimize"):
        res = optimize(spec, bank, transform=args.transform, mode=MODES[args.mode],
                       num_probes=args.probes, probe_seed=args.seed, **_continuation_kw(args))
    x_exact = args.x0 * np.exp(-0.5 * args.rho * grid.points)
    _write_optimize(rec, res, ["x_exact", "u_exact"], [x_exact, -x_exact])
    x_err = float(np.max(np.abs(res.ensemble.states[:, :, 0] - x_exact)))
    u_err = float(np.max(np.abs(res.control.paths[:, :, 0] + x_exact)))
    ok = x_err <= 1e-3 * max(1.0, abs(args.x0)) and u_err <= 2e-3 * max(1.0, abs(args.x0))
    print(f"sup|x - x0 e^(-rho s/2)| = {x_err:.2e}; sup|u* + x0 e^(-rho s/2)| = {u_err:.2e}; "
          f"J(u*) = {res.report.cost:.3e}")
    if not ok:
        raise NumericalError(f"closed-form mismatch: state error {x_err:.2e}, control error {u_err:.2e}")
    return 0


def cmd_verify(args, rec: RunRecorder) -> int:
    from .acceptance import run_all

    with rec.stage("verify"):
        results = run_all(args.profile, only=args.only)
    cols = ["criterion", "passed", "seconds"]
    rec.csv("verify.csv", cols, np.array([[r.number, float(r.passed), r.seconds] for r in results]))
    rec.json("verify.json", [{"criterion": r.number, "name": r.name, "passed": r.passed,
                              "detail": r.detail} for r in results])
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, problem: bool = True, solver: bool = False) -> None:
    if problem:
        p.add_argument("problem", help="JSON problem file")
    p.add_argument("--seed", type=int, default=0, help="noise seed (default 0)")
    p.add_argument("--paths", type=int, default=256, help="Monte Carlo paths M (default 256)")
    p.add_argument("--dt", type=float, default=None, help="override the grid step")
    p.add_argument("--T", type=float, default=None, help="override the truncation horizon")
    p.add_argument("--K", type=float, default=None, help="override the weight exponent")
    p.add_argument("--mode", choices=sorted(MODES), default="exact-mean",
                   help="mean-field coupling: exact mean ODE or empirical mean")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    p.add_argument("--out", default=None,
                   help=f"output directory (default ${DEFAULT_OUT_ENV} or ./mflq_out)")
    if solver:
        p.add_argument("--alpha-step", type=float, default=None, help="initial continuation step")
        p.add_argument("--damping", type=float, default=None, help="initial Picard damping")
        p.add_argument("--tol", type=float, default=None, help="Picard tolerance")
        p.add_argument("--transform", choices=("auto", "off"), default="auto",
                       help="eliminate cross terms when S or Sbar is nonzero")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mflq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mflq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="dissipation constants, positivity and K windows")
    _common(p)
    p.add_argument("--k-hat", type=float, default=0.0, help="continuation margin for the window")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="simulate the uncontrolled mean-field SDE")
    _common(p)
    p.add_argument("--quantiles", type=float, nargs="+", default=[0.05, 0.5, 0.95])
    p.add_argument("--save-paths", action="store_true", help="also write paths.npy")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("solve-bsde", help="solve the linear mean-field BSDE")
    _common(p)
    p.add_argument("--driver", type=float, nargs="+", default=None,
                   help="constant driver vector (default: adjoint driver of the uncontrolled state)")
    p.set_defaults(func=cmd_solve_bsde)

    p = sub.add_parser("solve-hamiltonian", help="solve the Hamiltonian system by continuation")
    _common(p, solver=True)
    p.set_defaults(func=cmd_solve_hamiltonian)

    p = sub.add_parser("optimize", help="transform, solve, synthesise and verify the optimal control")
    _common(p, solver=True)
    p.add_argument("--probes", type=int, default=2, help="random expansion probe directions")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("verify", help="run the acceptance suite")
    _common(p, problem=False)
    p.add_argument("--profile", choices=("full", "quick"), default="full")
    p.add_argument("--only", type=int, nargs="+", default=None, help="criterion numbers to run")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("example31", help="scalar cross-term example with a closed-form optimum")
    _common(p, problem=False, solver=True)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--a", type=float, default=0.0, help="constant value of the coefficient a")
    p.add_argument("--x0", type=float, default=1.0)
    p.add_argument("--probes", type=int, default=0)
    p.set_defaults(func=cmd_example31, paths=64)
    return parser


def _threads(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _validate(args)
    except UsageError as exc:
        print(f"mflq: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    out = Path(args.out or os.environ.get(DEFAULT_OUT_ENV) or "mflq_out")
    status = 1
    rec = None
    try:
        rec = RunRecorder(out, args.command, _config(args))
        with _threads(args.threads), warnings.catch_warnings():
            warnings.simplefilter("default")
            status = args.func(args, rec)
    except MFLQError as exc:
        print(f"mflq: {exc}", file=sys.stderr)
        status = exc.exit_code
    except FloatingPointError as exc:
        print(f"mflq: numerical failure: {exc}", file=sys.stderr)
        status = NumericalError.exit_code
    except OSError as exc:
        print(f"mflq: {exc}", file=sys.stderr)
        status = ProblemFileError.exit_code
    finally:
        if rec is not None:
            rec.finish(status)
    return status


if __name__ == "__main__":
    sys.exit(main())

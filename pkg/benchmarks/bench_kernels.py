"""Timing of the compiled kernels against the numpy fallback.

The forward (Euler) and backward (regression) solvers are timed end to end
with each backend swapped in.  Run with
``python3 benchmarks/bench_kernels.py [--paths M] [--steps N] [--repeat R]``.
"""

from __future__ import annotations

import argparse
import timeit
from contextlib import contextmanager

import numpy as np

from mflq import _kernels_py, kernels
from mflq.backward import solve_linear_bsde
from mflq.forward import NoiseBank, simulate_mfsde
from mflq.model import ControlProcess, MarkMeasure, TimeGrid, make_spec

NAMES = ("euler_paths", "euler_paths_empirical", "mean_ode", "backward_coeffs")


@contextmanager
def backend(impl):
    saved = {k: getattr(kernels, k) for k in NAMES}
    for k in NAMES:
        setattr(kernels, k, getattr(impl, k))
    try:
        yield
    finally:
        for k, v in saved.items():
            setattr(kernels, k, v)


def _problem(paths: int, steps: int):
    marks = MarkMeasure([[[0.3], [-0.2]]], [[0.5, 0.5]])
    grid = TimeGrid(0.0, 1.0, 1.0 / steps)
    spec = make_spec(3, 1, 2, grid, marks=marks, A=-np.eye(3), Abar=0.1 * np.eye(3),
                     B=np.ones((3, 1)), C=[0.2 * np.eye(3), 0.1 * np.eye(3)], M=0.3 * np.eye(3),
                     Q=np.eye(3), R=np.eye(1))
    return spec, NoiseBank.for_spec(spec, 0, paths)


def main() -> None:
    ap = argparse.ArgumentParser(description="kernel backend timings")
    ap.add_argument("--paths", type=int, default=500)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    spec, bank = _problem(args.paths, args.steps)
    impls = {"python": _kernels_py}
    if kernels.BACKEND == "cython":
        from mflq import _ckernels

        impls["cython"] = _ckernels
    else:
        print("compiled kernels unavailable; timing the fallback only")
    u = ControlProcess.zero(args.paths, spec.grid, spec.m)
    G, n = spec.grid.size, spec.n
    d, P = bank.d, bank.marks.num_atoms
    P1 = np.broadcast_to(-np.eye(n), (G, n, n)).copy()
    Gz, Hz = np.zeros((G, d, n, n)), np.zeros((G, P, n, n))
    x = simulate_mfsde(spec, bank, u).states
    f = x.copy()

    print(f"M={args.paths} N={args.steps} n={n} (best of {args.repeat})")
    for name, impl in impls.items():
        with backend(impl):
            t_exact = min(timeit.repeat(lambda: simulate_mfsde(spec, bank, u, mode="exact"),
                                        number=1, repeat=args.repeat))
            t_emp = min(timeit.repeat(lambda: simulate_mfsde(spec, bank, u, mode="empirical"),
                                      number=1, repeat=args.repeat))
            t_bsde = min(timeit.repeat(
                lambda: solve_linear_bsde(bank, P1, P1, Gz, Gz, Hz, Hz, f=f, state=x),
                number=1, repeat=args.repeat))
        print(f"{name:>7}: forward exact-mean {1e3 * t_exact:8.1f} ms   "
              f"forward empirical {1e3 * t_emp:8.1f} ms   linear BSDE {1e3 * t_bsde:8.1f} ms")


if __name__ == "__main__":
    main()

"""Open-loop optimal control: synthesis from the Hamiltonian system, cost
evaluation, stationarity checks, the quadratic expansion of the cost and
the closed-form scalar example with cross terms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .backward import AdjointSolution, noise_state, solve_mfbsde
from .errors import PreconditionError
from .forward import NoiseBank, PathEnsemble, simulate_mfsde
from .hamiltonian import (QuadrupleSolution, TransformedSpec, continuation_solve,
                          eliminate_cross_terms, guarded_inverse, lambda_tracks)
from .model import (ControlProcess, ProblemSpec, TimeGrid, apply_track, empirical_mean,
                    make_spec, weighted_inner, weighted_norm)

__all__ = ["ControlProcess", "OptimalityReport", "synthesize_control", "evaluate_cost",
           "solve_adjoint", "stationarity_residual", "first_variation", "quadratic_expansion_check",
           "probe_direction", "Example31", "example31_oracle", "example31_spec", "optimize"]

log = logging.getLogger(__name__)


def _mv(mat: np.ndarray, track: np.ndarray) -> np.ndarray:
    """Matrix track ``(G, a, b)`` times vector track ``(G, b)``."""
    return np.einsum("kab,kb->ka", mat, track)


def _T(mat: np.ndarray) -> np.ndarray:
    return np.swapaxes(mat, -1, -2)


# ---------------------------------------------------------------------------
# Synthesis and cost
# ---------------------------------------------------------------------------

def synthesize_control(solution: QuadrupleSolution, spec: ProblemSpec) -> ControlProcess:
    """Optimal control ``u = -R1^{-1}(Lam1 + S1 x1) - R2^{-1}(Lam2 + S2 E x)``.

    ``Lam`` is recomputed from the solution's adjoint processes with the
    coefficients of ``spec``.
    """
    c, cost = spec.coeffs, spec.cost
    R1inv = guarded_inverse(cost.combined("R", 1), "R^1")
    R2inv = guarded_inverse(cost.combined("R", 2), "R^2")
    B = (c.B, c.B + c.Bbar)
    D = (c.D, c.D + c.Dbar)
    N = (c.N, c.N + c.Nbar)
    lam1, lam2 = lambda_tracks(B, D, N, spec.marks.atom_weight, solution.y, solution.y_mean,
                               solution.z, solution.z_mean, solution.k, solution.k_mean)
    xm = solution.x_mean
    v1 = lam1 + apply_track(cost.S, solution.x - xm)
    v2 = lam2 + _mv(cost.combined("S", 2), xm)
    mean = -_mv(R2inv, v2)
    return ControlProcess(-apply_track(R1inv, v1) + mean, mean)


def _state_of(ensemble):
    if isinstance(ensemble, PathEnsemble):
        return ensemble.states, ensemble.mean_track, ensemble.grid
    if isinstance(ensemble, QuadrupleSolution):
        return ensemble.x, ensemble.x_mean, ensemble.bank.grid
    x, xm, grid = ensemble
    return x, xm, grid


def cost_samples(spec: ProblemSpec, x: np.ndarray, x_mean: np.ndarray, u: ControlProcess,
                 K: float, grid: TimeGrid) -> tuple[np.ndarray, float]:
    """Per-path running cost integrals and the deterministic mean-part integral."""
    cost = spec.cost
    if u.paths.shape[:2] != x.shape[:2] or u.mean.shape[0] != x_mean.shape[0]:
        raise ValueError(f"control shape {u.paths.shape} inconsistent with state shape {x.shape}")
    w = grid.trapezoid_weights * np.exp(2.0 * K * grid.points)
    Qx = apply_track(cost.Q, x)
    Sx = apply_track(cost.S, x)
    Ru = apply_track(cost.R, u.paths)
    run = (np.einsum("mka,mka->mk", Qx, x) + 2.0 * np.einsum("mka,mka->mk", Sx, u.paths)
           + np.einsum("mka,mka->mk", Ru, u.paths))
    xm, um = x_mean, u.mean
    mean = (np.einsum("ka,ka->k", _mv(cost.Qbar, xm), xm) + 2.0 * np.einsum("ka,ka->k", _mv(cost.Sbar, xm), um)
            + np.einsum("ka,ka->k", _mv(cost.Rbar, um), um))
    return 0.5 * (run @ w), 0.5 * float(mean @ w)


def evaluate_cost(spec: ProblemSpec, ensemble, u: ControlProcess | None = None,
                  K: float | None = None) -> float:
    """Weighted quadratic cost by the trapezoidal rule.

    ``J = 1/2 E int e^{2Ks} [<Q x, x> + 2 <S x, u> + <R u, u>] ds
    + 1/2 int e^{2Ks} [<Qbar Ex, Ex> + 2 <Sbar Ex, Eu> + <Rbar Eu, Eu>] ds``
    with ``Ex, Eu`` the mean tracks carried by the ensemble and control.
    """
    x, xm, grid = _state_of(ensemble)
    if u is None:
        u = getattr(ensemble, "control", None)
        if u is None:
            raise ValueError("no control given and the ensemble carries none")
    K = spec.K if K is None else float(K)
    run, mean = cost_samples(spec, x, xm, u, K, grid)
    return float(empirical_mean(run)) + mean


# ---------------------------------------------------------------------------
# Adjoint and stationarity
# ---------------------------------------------------------------------------

def solve_adjoint(spec: ProblemSpec, ensemble, u: ControlProcess, bank: NoiseBank,
                  K: float | None = None, state: np.ndarray | None = None) -> AdjointSolution:
    """Adjoint equation of a state-control pair.

    The driver forcing is ``Q1 x1 + S1^T u1 + Q2 Ex + S2^T Eu`` (fluctuation
    and mean parts).  The regression state defaults to the state paths, with
    the noise paths appended when the control is not a function of the state.
    """
    x, xm, _ = _state_of(ensemble)
    K = spec.K if K is None else float(K)
    cost = spec.cost
    S2 = cost.combined("S", 2)
    Q2 = cost.combined("Q", 2)
    f_mean = _mv(Q2, xm) + _mv(_T(S2), u.mean)
    f = apply_track(cost.Q, x - xm) + apply_track(_T(cost.S), u.paths - u.mean) + f_mean
    if state is None:
        state = np.concatenate([x, noise_state(bank)], axis=2) if bank.d or bank.marks.num_atoms else x
    return solve_mfbsde(spec, f, K, bank, state=state, f_mean=f_mean)


def _lambda_of(spec: ProblemSpec, adj: AdjointSolution):
    c = spec.coeffs
    return lambda_tracks((c.B, c.B + c.Bbar), (c.D, c.D + c.Dbar), (c.N, c.N + c.Nbar),
                         spec.marks.atom_weight, adj.y, adj.y_mean, adj.z, adj.z_mean, adj.k,
                         adj.k_mean)


@dataclass
class StationarityResidual:
    """Left side of the stationarity condition along paths and its weighted norm."""

    process: np.ndarray
    mean: np.ndarray
    norm: float
    relative: float
    profile: np.ndarray


def stationarity_residual(spec: ProblemSpec, ensemble, u: ControlProcess, adjoint: AdjointSolution,
                          K: float | None = None) -> StationarityResidual:
    """``R1 u1 + S1 x1 + Lam1 + R2 Eu + S2 Ex + Lam2`` per path and grid point.

    ``relative`` divides the weighted norm by ``max(1, |u|)``; ``profile`` is
    the root-mean-square residual per grid point.
    """
    x, xm, grid = _state_of(ensemble)
    K = spec.K if K is None else float(K)
    cost = spec.cost
    lam1, lam2 = _lambda_of(spec, adjoint)
    mean = _mv(cost.combined("R", 2), u.mean) + _mv(cost.combined("S", 2), xm) + lam2
    res = (apply_track(cost.R, u.paths - u.mean) + apply_track(cost.S, x - xm) + lam1 + mean)
    nrm = float(np.sqrt(weighted_norm(res, K, grid)))
    un = float(np.sqrt(weighted_norm(u.paths, K, grid)))
    profile = np.sqrt(np.mean(np.einsum("mka,mka->mk", res, res), axis=0))
    return StationarityResidual(res, mean, nrm, nrm / max(1.0, un), profile)


# ---------------------------------------------------------------------------
# Quadratic expansion
# ---------------------------------------------------------------------------

def first_variation(spec: ProblemSpec, x, x_mean, u: ControlProcess, x0, x0_mean,
                    v: ControlProcess, K: float, grid: TimeGrid) -> float:
    """Directional derivative of the discrete cost at ``(x, u)`` along ``(x0, v)``.

    ``x0`` is the response of the homogeneous state equation to ``v``.
    """
    cost = spec.cost
    w = grid.trapezoid_weights * np.exp(2.0 * K * grid.points)
    gx = apply_track(cost.Q, x) + apply_track(_T(cost.S), u.paths)
    gu = apply_track(cost.S, x) + apply_track(cost.R, u.paths)
    run = np.einsum("mka,mka->mk", gx, x0) + np.einsum("mka,mka->mk", gu, v.paths)
    gxm = _mv(cost.Qbar, x_mean) + _mv(_T(cost.Sbar), u.mean)
    gum = _mv(cost.Sbar, x_mean) + _mv(cost.Rbar, u.mean)
    mean = np.einsum("ka,ka->k", gxm, x0_mean) + np.einsum("ka,ka->k", gum, v.mean)
    return float(empirical_mean(run @ w)) + float(mean @ w)


def probe_direction(bank: NoiseBank, m: int, seed: int, K: float = 0.0,
                    pole: float = 0.9) -> ControlProcess:
    """Adapted random probe direction.

    Each path filters its own past noise increments (plus a deterministic
    offset) through a one-pole filter ``v_k = pole v_{k-1} + (1 - pole) e_k``,
    damped by ``exp(-(K + 1/2)(s - t0))`` so that it lies in the weighted
    space.  The fluctuation and mean channels are then rescaled by random
    factors.  Using only past increments keeps ``v`` adapted.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    grid = bank.grid
    M, G = bank.num_paths, grid.size
    d, P = bank.d, bank.marks.num_atoms
    offset = rng.standard_normal(m)
    mix_w = rng.standard_normal((d, m))
    mix_n = rng.standard_normal((P, m))
    scale_n = 1.0 / np.sqrt(np.maximum(bank.marks.atom_weight * grid.dt, np.finfo(float).tiny))
    drive = np.broadcast_to(offset, (M, G, m)).copy()
    if d:
        drive[:, 1:] += (bank.dW / np.sqrt(grid.dt)) @ mix_w
    if P:
        drive[:, 1:] += (bank.dNt * scale_n) @ mix_n
    v = np.empty((M, G, m))
    acc = np.zeros((M, m))
    for k in range(G):
        acc = pole * acc + (1.0 - pole) * drive[:, k]
        v[:, k] = acc
    v *= np.exp(-(K + 0.5) * (grid.points - grid.t0))[None, :, None]
    mean = empirical_mean(v)
    a1, a2 = rng.uniform(0.5, 1.5, size=2)
    paths = a1 * (v - mean) + a2 * mean
    return ControlProcess(paths, a2 * mean)


@dataclass
class ExpansionRow:
    direction: int
    epsilon: float
    lhs: float
    rhs: float
    first_order: float
    second_order: float
    error: float
    adjoint_first_order: float | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def quadratic_expansion_check(spec: ProblemSpec, bank: NoiseBank, u_star: ControlProcess,
                              directions, epsilons=(1e-3, 1e-2, 1e-1), K: float | None = None,
                              mode: str = "exact", x0=None,
                              adjoint: AdjointSolution | None = None) -> list[ExpansionRow]:
    """Check ``J(u + eps v) - J(u) = eps dJ(u; v) + eps^2 J0(v)`` on common noise.

    ``dJ`` is the exact first variation of the discrete cost and ``J0(v)``
    the cost of the homogeneous response ``x0`` to ``v`` (zero initial state,
    no forcing).  The identity is exact for the discrete scheme, so the
    reported relative errors measure floating point only.  When ``adjoint``
    is given, the first-order term from the stationarity residual,
    ``<residual, v>``, is reported alongside for comparison.
    """
    K = spec.K if K is None else float(K)
    grid = bank.grid
    base = simulate_mfsde(spec, bank, u_star, mode=mode, x0=x0)
    J_base = evaluate_cost(spec, base, u_star, K)
    zero = np.zeros(spec.n)
    rows = []
    resid = None
    if adjoint is not None:
        resid = stationarity_residual(spec, base, u_star, adjoint, K)
    for j, v in enumerate(directions):
        hom = simulate_mfsde(spec.with_x0(zero), bank, v, mode=mode, x0=zero)
        dJ = first_variation(spec, base.states, base.mean_track, u_star, hom.states, hom.mean_track,
                             v, K, grid)
        J0 = evaluate_cost(spec, hom, v, K)
        adj_first = None
        if resid is not None:
            adj_first = weighted_inner(resid.process, v.paths, K, grid)
        for eps in epsilons:
            pert = u_star + v.scale(eps)
            ens = simulate_mfsde(spec, bank, pert, mode=mode, x0=x0)
            lhs = evaluate_cost(spec, ens, pert, K) - J_base
            rhs = eps * dJ + eps * eps * J0
            err = abs(lhs - rhs) / (abs(lhs) + abs(rhs) + 1e-300)
            rows.append(ExpansionRow(j, float(eps), lhs, rhs, eps * dJ, eps * eps * J0, err,
                                     None if adj_first is None else eps * adj_first))
    return rows


# ---------------------------------------------------------------------------
# Example with cross terms
# ---------------------------------------------------------------------------

def example31_spec(rho: float = 1.0, a=0.0, x0: float = 1.0, grid: TimeGrid | None = None,
                   K: float = 0.0) -> ProblemSpec:
    """Scalar problem whose cross terms make the untransformed window empty.

    ``dx = [-(a + 2 rho) x + a Ex - (a + 3 rho / 2) u + a Eu] ds
    + sqrt(2 (a + rho)) [x + Ex + u + Eu] dW`` with running cost
    ``(x + u)^2 + (Ex + Eu)^2``.  ``a`` is a constant or a function of time.
    """
    if rho <= 0:
        raise PreconditionError(f"rho={rho:.6g} must be positive")
    grid = grid or TimeGrid(0.0, 20.0, 1e-3)
    a_fn = a if callable(a) else (lambda s, _a=float(a): _a)
    vals = np.array([float(a_fn(s)) for s in grid.points])
    if np.any(vals + rho <= 0):
        raise PreconditionError("a(s) + rho must be positive on the grid")
    from .model import as_table

    tab = lambda v: as_table(np.asarray(v, dtype=float).reshape(-1, 1, 1))  # noqa: E731
    sig = np.sqrt(2.0 * (vals + rho))
    return make_spec(1, 1, 1, grid, x0=[x0], K=K,
                     A=tab(-(vals + 2.0 * rho)), Abar=tab(vals), B=tab(-(vals + 1.5 * rho)),
                     Bbar=tab(vals), C=as_table(sig.reshape(-1, 1, 1, 1)),
                     Cbar=as_table(sig.reshape(-1, 1, 1, 1)), D=as_table(sig.reshape(-1, 1, 1, 1)),
                     Dbar=as_table(sig.reshape(-1, 1, 1, 1)),
                     Q=1.0, Qbar=1.0, S=1.0, Sbar=1.0, R=1.0, Rbar=1.0)


@dataclass
class Example31:
    """Closed-form solution of the scalar cross-term example on a grid."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    u: np.ndarray
    spec: ProblemSpec
    transformed: TransformedSpec


def example31_oracle(rho: float = 1.0, a=0.0, x0: float = 1.0,
                     grid: TimeGrid | None = None) -> Example31:
    """``x = x0 exp(-rho s / 2)``, ``y = z = 0`` and ``u* = -x`` on the grid."""
    spec = example31_spec(rho, a, x0, grid)
    g = spec.grid
    x = x0 * np.exp(-0.5 * rho * (g.points - g.t0))
    zero = np.zeros_like(x)
    return Example31(x, zero, zero.copy(), -x, spec, eliminate_cross_terms(spec))


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass
class OptimalityReport:
    """Summary of an optimisation run.

    ``probes`` rows carry ``(direction, epsilon, dJ)`` from the convexity
    probe; ``expansion`` rows the quadratic-expansion identity.
    """

    cost: float
    stationarity_norm: float
    stationarity_relative: float
    stationarity_profile: np.ndarray
    probes: list = field(default_factory=list)
    expansion: list = field(default_factory=list)
    expansion_error: float = 0.0
    duality_gap: float | None = None

    def to_dict(self) -> dict:
        return {"cost": self.cost, "stationarity_norm": self.stationarity_norm,
                "stationarity_relative": self.stationarity_relative,
                "probes": [dict(p) for p in self.probes],
                "expansion": [r.to_dict() for r in self.expansion],
                "expansion_error": self.expansion_error, "duality_gap": self.duality_gap}


@dataclass
class OptimizeResult:
    spec: ProblemSpec
    solved_spec: ProblemSpec
    transformed: TransformedSpec | None
    solution: QuadrupleSolution
    state: object
    control: ControlProcess
    ensemble: PathEnsemble
    report: OptimalityReport


def optimize(spec: ProblemSpec, bank: NoiseBank, K: float | None = None, transform: str = "auto",
             mode: str = "exact", num_probes: int = 4, probe_eps=(-1e-1, -1e-2, 1e-2, 1e-1),
             probe_seed: int = 0, check: bool = True, **continuation) -> OptimizeResult:
    """Transform (if needed), solve the Hamiltonian system, synthesise and verify.

    Parameters
    ----------
    transform : "auto" applies the cross-term elimination when ``S`` or
        ``Sbar`` is nonzero; "off" solves ``spec`` as given (which is refused
        when cross terms are present).
    num_probes : number of random probe directions for the convexity and
        expansion checks (0 disables them).
    continuation : keyword arguments forwarded to :func:`continuation_solve`.
    """
    K = spec.K if K is None else float(K)
    ts = None
    solved = spec
    if transform == "auto" and spec.cost.has_cross_terms():
        ts = eliminate_cross_terms(spec)
        solved = ts.spec
    elif transform not in ("auto", "off"):
        raise ValueError(f"transform must be 'auto' or 'off', got {transform!r}")
    sol, state = continuation_solve(solved, bank, K=K, mode=mode, **continuation)
    # the Hamiltonian systems coincide, so the original coefficients give u directly
    u = synthesize_control(sol, spec)
    ens = simulate_mfsde(spec, bank, u, mode=mode)
    J = evaluate_cost(spec, ens, u, K)
    adj = solve_adjoint(spec, ens, u, bank, K) if check else None
    if adj is not None:
        res = stationarity_residual(spec, ens, u, adj, K)
        report = OptimalityReport(J, res.norm, res.relative, res.profile)
    else:
        report = OptimalityReport(J, float("nan"), float("nan"), np.zeros(0))
    if check and num_probes:
        dirs = [probe_direction(bank, spec.m, probe_seed + j, K) for j in range(num_probes)]
        rows = quadratic_expansion_check(spec, bank, u, dirs, probe_eps, K, mode, adjoint=adj)
        report.expansion = rows
        report.expansion_error = max(r.error for r in rows)
        report.probes = [{"direction": r.direction, "epsilon": r.epsilon, "dJ": r.lhs} for r in rows]
        # adjoint-form versus exact first-order term, relative to the size of the increment
        gaps = [abs(r.adjoint_first_order - r.first_order)
                / (abs(r.first_order) + abs(r.second_order) + 1e-300)
                for r in rows if r.adjoint_first_order is not None]
        report.duality_gap = max(gaps) if gaps else None
    return OptimizeResult(spec, solved, ts, sol, state, u, ens, report)

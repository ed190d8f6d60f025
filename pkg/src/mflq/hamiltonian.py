"""Fully coupled mean-field FBSDE with jumps (the Hamiltonian system) solved
by continuation in a homotopy parameter ``alpha``.

At ``alpha = 0`` the system decouples: the backward equation is solved
first and its adjoint processes drive the forward equation.  Each larger
``alpha`` is solved by damped Gauss-Seidel Picard iteration (forward given
the adjoint, then backward given the state), warm-started from the previous
level.  Problems with state-control cross terms in the cost are first mapped
to an equivalent cross-term-free problem.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .backward import AdjointSolution, adjoint_from_coefficients, build_basis, solve_linear_bsde
from .errors import NumericalError, PreconditionError
from .forward import NoiseBank, decay_profile, mean_of, paths_view, run_linear_forward
from .model import (CoefficientSet, ControlProcess, CostSet, ForcingTuple, ProblemSpec, apply_track,
                    contract_track, empirical_mean, weighted_norm)

log = logging.getLogger(__name__)

COND_GUARD = 1e12
DELTA0 = 0.1
DAMPING = 0.5
TOL_PICARD = 1e-8
DELTA_MIN = 1e-4
MAX_ITER = 200
MEMORY = 5
SLOW_RATIO = 0.9
FAST_RATIO = 0.6


class WindowWarning(UserWarning):
    """``K`` lies outside the guaranteed continuation window."""


# ---------------------------------------------------------------------------
# Cross-term elimination
# ---------------------------------------------------------------------------

def guarded_inverse(R: np.ndarray, name: str = "R") -> np.ndarray:
    """Invert a ``(G, m, m)`` stack, refusing near-singular entries."""
    cond = np.linalg.cond(R)
    bad = ~np.isfinite(cond) | (cond > COND_GUARD)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise PreconditionError(f"{name} is singular or ill-conditioned at grid point {k} "
                                f"(condition number {cond[k]:.3e} > {COND_GUARD:.0e}); "
                                f"uniform positivity of R is required")
    return np.linalg.inv(R)


@dataclass
class TransformedSpec:
    """Cross-term-free problem equivalent to ``original``.

    The control substitution ``bu = u + Theta1 (x - E x) + Theta2 E x`` with
    ``Theta_iota = (R^iota)^{-1} S^iota`` turns the drift, diffusion and jump
    coefficients into ``A^iota - B^iota Theta_iota`` (and likewise for C, M)
    and the state cost into ``Q^iota - S^iota^T Theta_iota``; the control
    coefficients and R are unchanged and the cross terms vanish.  The weight
    exponent is kept.
    """

    spec: ProblemSpec
    original: ProblemSpec
    theta1: np.ndarray
    theta2: np.ndarray

    @property
    def K(self) -> float:
        return self.spec.K

    def combined(self, name: str, iota: int) -> np.ndarray:
        src = self.spec.cost if name.startswith(("Q", "S", "R")) else self.spec.coeffs
        return src.combined(name, iota)

    def to_transformed(self, u: ControlProcess, x: np.ndarray, x_mean: np.ndarray) -> ControlProcess:
        """Map an original control to the transformed one along state paths ``x``."""
        shift = (apply_track(self.theta1, x - x_mean)
                 + np.einsum("kab,kb->ka", self.theta2, x_mean))
        return ControlProcess(u.paths + shift, u.mean + np.einsum("kab,kb->ka", self.theta2, x_mean))

    def from_transformed(self, bu: ControlProcess, x: np.ndarray, x_mean: np.ndarray) -> ControlProcess:
        """Inverse of :meth:`to_transformed`."""
        shift = (apply_track(self.theta1, x - x_mean)
                 + np.einsum("kab,kb->ka", self.theta2, x_mean))
        return ControlProcess(bu.paths - shift, bu.mean - np.einsum("kab,kb->ka", self.theta2, x_mean))


def eliminate_cross_terms(spec: ProblemSpec) -> TransformedSpec:
    """Remove the state-control cross terms ``S, Sbar`` from the cost."""
    c, cost = spec.coeffs, spec.cost
    R1 = cost.combined("R", 1)
    R2 = cost.combined("R", 2)
    th1 = guarded_inverse(R1, "R^1") @ cost.combined("S", 1)
    th2 = guarded_inverse(R2, "R^2") @ cost.combined("S", 2)

    def pair(X1, X2):
        return X1, X2 - X1

    A1 = c.A - c.B @ th1
    A2 = (c.A + c.Abar) - (c.B + c.Bbar) @ th2
    C1 = c.C - np.einsum("kiab,kbc->kiac", c.D, th1)
    C2 = (c.C + c.Cbar) - np.einsum("kiab,kbc->kiac", c.D + c.Dbar, th2)
    M1 = c.M - np.einsum("kpab,kbc->kpac", c.N, th1)
    M2 = (c.M + c.Mbar) - np.einsum("kpab,kbc->kpac", c.N + c.Nbar, th2)
    Q1 = cost.Q - np.swapaxes(cost.S, -1, -2) @ th1
    Q2 = (cost.Q + cost.Qbar) - np.swapaxes(cost.S + cost.Sbar, -1, -2) @ th2
    Q1 = 0.5 * (Q1 + np.swapaxes(Q1, -1, -2))
    Q2 = 0.5 * (Q2 + np.swapaxes(Q2, -1, -2))
    A, Abar = pair(A1, A2)
    C, Cbar = pair(C1, C2)
    M, Mbar = pair(M1, M2)
    Q, Qbar = pair(Q1, Q2)
    coeffs = CoefficientSet(A, Abar, c.B, c.Bbar, C, Cbar, c.D, c.Dbar, M, Mbar, c.N, c.Nbar)
    zero = np.zeros_like(cost.S)
    new_cost = CostSet(Q, Qbar, zero, zero.copy(), cost.R, cost.Rbar, K=cost.K)
    new = replace(spec, coeffs=coeffs, cost=new_cost, sources=None)
    return TransformedSpec(new, spec, th1, th2)


# ---------------------------------------------------------------------------
# Level systems
# ---------------------------------------------------------------------------

@dataclass
class LevelSystem:
    """Coefficients of the homotopy system at one value of ``alpha``.

    Forward: ``dx = (F x + Fb E x - sum_iota B^iota R^iota^{-1} Lam^iota + phi) ds
    + (Gf x + Gbf E x - ... + psi) dW + (Hf x + Hbf E x - ... + chi) dNt``.

    Backward driver: ``P1 y1 + P2 y2 + G1 z1 + G2 z2 + w (H1 k1 + H2 k2)
    + Qc1 x1 + Qc2 x2 + varphi`` (``1``/``2`` fluctuation and mean parts).
    ``Lam^iota = B^iota^T y^iota + sum_i D_i^iota^T z_i^iota + sum_p w_p N_p^iota^T k_p^iota``.
    """

    alpha: float
    F: np.ndarray
    Fb: np.ndarray
    Gf: np.ndarray
    Gbf: np.ndarray
    Hf: np.ndarray
    Hbf: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    G1: np.ndarray
    G2: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    Qc1: np.ndarray
    Qc2: np.ndarray
    B: tuple
    D: tuple
    N: tuple
    Rinv: tuple


def _control_maps(spec: ProblemSpec):
    c, cost = spec.coeffs, spec.cost
    Rinv = (guarded_inverse(cost.combined("R", 1), "R^1"), guarded_inverse(cost.combined("R", 2), "R^2"))
    B = (c.B, c.B + c.Bbar)
    D = (c.D, c.D + c.Dbar)
    N = (c.N, c.N + c.Nbar)
    return B, D, N, Rinv


def assemble_level(spec: ProblemSpec, alpha: float, K: float, kappa1: float, kappa2: float) -> LevelSystem:
    """Coefficients of the homotopy system at level ``alpha``.

    The state-dependent coefficients are scaled by ``alpha``; the forward
    drift gains ``-(1 - alpha) kappa1 x`` and the backward driver
    ``-(1 - alpha) kappa2 y``.  The control coupling through ``Lam`` is
    present at every level.
    """
    c, cost = spec.coeffs, spec.cost
    a = float(alpha)
    eye = np.eye(spec.n)
    damp_f = (1.0 - a) * kappa1
    damp_b = (1.0 - a) * kappa2
    A2 = c.A + c.Abar
    B, D, N, Rinv = _control_maps(spec)
    return LevelSystem(
        alpha=a,
        F=a * c.A - damp_f * eye, Fb=a * c.Abar,
        Gf=a * c.C, Gbf=a * c.Cbar, Hf=a * c.M, Hbf=a * c.Mbar,
        P1=a * np.swapaxes(c.A + 2.0 * K * eye, -1, -2) - damp_b * eye,
        P2=a * np.swapaxes(A2 + 2.0 * K * eye, -1, -2) - damp_b * eye,
        G1=a * np.swapaxes(c.C, -1, -2), G2=a * np.swapaxes(c.C + c.Cbar, -1, -2),
        H1=a * np.swapaxes(c.M, -1, -2), H2=a * np.swapaxes(c.M + c.Mbar, -1, -2),
        Qc1=a * cost.Q, Qc2=a * (cost.Q + cost.Qbar),
        B=B, D=D, N=N, Rinv=Rinv,
    )


def hamiltonian_coefficients(spec: ProblemSpec, K: float) -> dict:
    """Coefficients of the target Hamiltonian system, read directly off the
    state equation, the adjoint equation and the optimal control formula.

    Used as an independent reference for the ``alpha = 1`` level.
    """
    c, cost = spec.coeffs, spec.cost
    n = spec.n
    T = lambda X: np.swapaxes(X, -1, -2)  # noqa: E731
    return {
        "F": c.A, "Fb": c.Abar, "Gf": c.C, "Gbf": c.Cbar, "Hf": c.M, "Hbf": c.Mbar,
        "P1": T(c.A) + 2.0 * K * np.eye(n), "P2": T(c.A) + T(c.Abar) + 2.0 * K * np.eye(n),
        "G1": T(c.C), "G2": T(c.C) + T(c.Cbar), "H1": T(c.M), "H2": T(c.M) + T(c.Mbar),
        "Qc1": cost.Q, "Qc2": cost.Q + cost.Qbar,
    }


# ---------------------------------------------------------------------------
# Solutions
# ---------------------------------------------------------------------------

@dataclass
class QuadrupleSolution:
    """State and adjoint processes of the coupled system on the grid.

    Attributes
    ----------
    x, y : (M, G, n); z : (M, G, d, n); k : (M, G, P, n)
    x_mean, y_mean, z_mean, k_mean : mean tracks
    lam1 : (M, G, m) fluctuation part of ``Lam``; lam2 : (G, m) mean part
    """

    x: np.ndarray
    x_mean: np.ndarray
    y: np.ndarray
    y_mean: np.ndarray
    z: np.ndarray
    z_mean: np.ndarray
    k: np.ndarray
    k_mean: np.ndarray
    lam1: np.ndarray
    lam2: np.ndarray
    K: float
    alpha: float = 1.0
    bank: NoiseBank | None = field(default=None, repr=False)
    info: dict = field(default_factory=dict)

    def blend(self, other: "QuadrupleSolution", lam: float) -> "QuadrupleSolution":
        """``lam * other + (1 - lam) * self`` componentwise."""
        mix = lambda a, b: lam * b + (1.0 - lam) * a  # noqa: E731
        return QuadrupleSolution(
            mix(self.x, other.x), mix(self.x_mean, other.x_mean), mix(self.y, other.y),
            mix(self.y_mean, other.y_mean), mix(self.z, other.z), mix(self.z_mean, other.z_mean),
            mix(self.k, other.k), mix(self.k_mean, other.k_mean), mix(self.lam1, other.lam1),
            mix(self.lam2, other.lam2), self.K, other.alpha, self.bank, dict(other.info))

    def norm_sq(self) -> float:
        """Squared weighted norm of ``(x, y, z, k)``."""
        g = self.bank.grid
        out = weighted_norm(self.x, self.K, g) + weighted_norm(self.y, self.K, g)
        out += weighted_norm(self.z, self.K, g)
        if self.k.shape[2]:
            out += weighted_norm(self.k, self.K, g, marks=self.bank.marks)
        return out

    def distance(self, other: "QuadrupleSolution") -> float:
        g = self.bank.grid
        d2 = (weighted_norm(self.x - other.x, self.K, g) + weighted_norm(self.y - other.y, self.K, g)
              + weighted_norm(self.z - other.z, self.K, g))
        if self.k.shape[2]:
            d2 += weighted_norm(self.k - other.k, self.K, g, marks=self.bank.marks)
        return float(np.sqrt(d2))

    def recompute_lambda(self, spec: ProblemSpec) -> tuple[np.ndarray, np.ndarray]:
        B, D, N, _ = _control_maps(spec)
        return lambda_tracks(B, D, N, spec.marks.atom_weight, self.y, self.y_mean, self.z,
                             self.z_mean, self.k, self.k_mean)


def lambda_tracks(B, D, N, w, y, ym, z, zm, k, km):
    """``Lam^1`` per path (fluctuation parts) and ``Lam^2`` (mean parts)."""
    lam1 = contract_track(B[0], y - ym)
    lam2 = np.einsum("kau,ka->ku", B[1], ym)
    if z.shape[2]:
        lam1 = lam1 + contract_track(D[0], z - zm)
        lam2 = lam2 + np.einsum("kiau,kia->ku", D[1], zm)
    if k.shape[2]:
        lam1 = lam1 + contract_track(N[0] * w[None, :, None, None], k - km)
        lam2 = lam2 + np.einsum("kpau,kpa,p->ku", N[1], km, w)
    return lam1, lam2


@dataclass
class _Setup:
    spec: ProblemSpec
    bank: NoiseBank
    K: float
    xi: np.ndarray
    xi_mean: np.ndarray
    zeta: ForcingTuple
    mode: str
    extra_state: np.ndarray | None
    kappa1: float
    kappa2: float
    fixed_state: np.ndarray | None = None

    def regression_state(self, x: np.ndarray) -> np.ndarray:
        """Regressors built from state paths ``x`` (plus any extra state)."""
        if self.extra_state is None:
            return x
        return np.concatenate([x, self.extra_state], axis=2)


def _forward(setup: _Setup, lv: LevelSystem, adj) -> tuple:
    """Forward solve given adjoint processes ``adj = (y, ym, z, zm, k, km)``."""
    spec, bank = setup.spec, setup.bank
    M, G = bank.num_paths, bank.grid.size
    n, d, P = spec.n, spec.d, spec.marks.num_atoms
    y, ym, z, zm, k, km = adj
    lam1, lam2 = lambda_tracks(lv.B, lv.D, lv.N, spec.marks.atom_weight, y, ym, z, zm, k, km)
    v1 = apply_track(lv.Rinv[0], lam1)
    v2 = np.einsum("kuj,kj->ku", lv.Rinv[1], lam2)
    zt = setup.zeta
    f = -apply_track(lv.B[0], v1) - np.einsum("kau,ku->ka", lv.B[1], v2)
    fbar = -np.einsum("kau,ku->ka", lv.B[1], v2) + mean_of(zt.drift, G, (n,))
    f = f + paths_view(zt.drift, M, G, (n,))
    if d:
        g = (-apply_track(lv.D[0], v1) - np.einsum("kiau,ku->kia", lv.D[1], v2)
             + paths_view(zt.diffusion, M, G, (d, n)))
    else:
        g = np.broadcast_to(0.0, (M, G, 0, n))
    if P:
        h = (-apply_track(lv.N[0], v1) - np.einsum("kpau,ku->kpa", lv.N[1], v2)
             + paths_view(zt.jump, M, G, (P, n)))
    else:
        h = np.broadcast_to(0.0, (M, G, 0, n))
    x, xbar = run_linear_forward(bank, setup.xi, setup.xi_mean, lv.F, lv.Fb, f, fbar,
                                 lv.Gf, lv.Gbf, g, lv.Hf, lv.Hbf, h, setup.mode)
    return x, xbar, lam1, lam2


def _backward(setup: _Setup, lv: LevelSystem, x, xbar, state=None, basis=None) -> AdjointSolution:
    """Backward solve given the state paths (regressors default to ``x``)."""
    spec, bank = setup.spec, setup.bank
    M, G, n = bank.num_paths, bank.grid.size, spec.n
    zt = setup.zeta
    f = (apply_track(lv.Qc1, x - xbar) + np.einsum("kab,kb->ka", lv.Qc2, xbar)
         + paths_view(zt.driver, M, G, (n,)))
    f_mean = None
    if setup.mode == "exact":
        f_mean = np.einsum("kab,kb->ka", lv.Qc2, xbar) + mean_of(zt.driver, G, (n,))
    if state is None:
        state = setup.fixed_state if setup.fixed_state is not None else setup.regression_state(x)
    return solve_linear_bsde(bank, lv.P1, lv.P2, lv.G1, lv.G2, lv.H1, lv.H2, f=f, f_mean=f_mean,
                             terminal=None, state=state, basis=basis)


def _pack(setup: _Setup, lv: LevelSystem, x, xbar, adj: AdjointSolution) -> QuadrupleSolution:
    spec = setup.spec
    lam1, lam2 = lambda_tracks(lv.B, lv.D, lv.N, spec.marks.atom_weight, adj.y, adj.y_mean,
                               adj.z, adj.z_mean, adj.k, adj.k_mean)
    info = dict(adj.info, mode=setup.mode)
    return QuadrupleSolution(x, xbar, adj.y, adj.y_mean, adj.z, adj.z_mean, adj.k, adj.k_mean,
                             lam1, lam2, setup.K, lv.alpha, setup.bank, info)


def _zero_adjoint(spec: ProblemSpec, M: int, G: int):
    n, d, P = spec.n, spec.d, spec.marks.num_atoms
    return (np.zeros((M, G, n)), np.zeros((G, n)), np.zeros((M, G, d, n)), np.zeros((G, d, n)),
            np.zeros((M, G, P, n)), np.zeros((G, P, n)))


def _setup(spec, bank, xi, zeta, K, mode, extra_state) -> _Setup:
    from .spectral import compute_kappas

    if bank.grid != spec.grid:
        raise ValueError("noise bank and problem spec live on different grids")
    k1, k2, _ = compute_kappas(spec)
    M = bank.num_paths
    if xi is None:
        xi_paths = bank.initial_states(spec)
        xi_mean = np.asarray(spec.x0_law.mean, dtype=float)
    else:
        xi = np.asarray(xi, dtype=float)
        xi_paths = np.broadcast_to(xi, (M, spec.n)).copy() if xi.ndim == 1 else xi
        xi_mean = xi if xi.ndim == 1 else empirical_mean(xi)
    return _Setup(spec, bank, float(K), xi_paths, xi_mean, zeta or ForcingTuple(), mode,
                  extra_state, k1, k2)


def _check_base_window(K: float, k1: float, k2: float) -> None:
    if not k1 > -k2:
        raise PreconditionError(f"kappa1={k1:.6g} <= -kappa2={-k2:.6g}: the decoupled base case "
                                f"requires kappa1 > -kappa2")
    if not -k2 < K < k1:
        raise PreconditionError(f"K={K:.6g} outside (-kappa2, kappa1) = ({-k2:.6g}, {k1:.6g}): "
                                f"base-case window violated")


def solve_base_case(spec: ProblemSpec, bank: NoiseBank, xi=None, zeta: ForcingTuple | None = None,
                    K: float | None = None, mode: str = "exact",
                    extra_state: np.ndarray | None = None,
                    fixed_state: np.ndarray | None = None) -> QuadrupleSolution:
    """Solve the decoupled ``alpha = 0`` system.

    The backward equation ``dy = (kappa2 y - varphi) ds + z dW + k dNt`` is
    solved first; its ``Lam`` terms then drive the forward equation with
    drift ``-kappa1 x - sum_iota B^iota R^iota^{-1} Lam^iota + phi``.
    """
    K = spec.K if K is None else float(K)
    st = _setup(spec, bank, xi, zeta, K, mode, extra_state)
    _check_base_window(K, st.kappa1, st.kappa2)
    lv = assemble_level(spec, 0.0, K, st.kappa1, st.kappa2)
    G = bank.grid.size
    # the driver does not see x at alpha = 0; the noise (plus any extra state) spans the basis
    M = bank.num_paths
    zt = st.zeta
    f = paths_view(zt.driver, M, G, (spec.n,))
    state = st.extra_state if fixed_state is None else fixed_state
    if zt.driver is not None and np.ndim(zt.driver) == 3 and state is None:
        from .backward import noise_state
        state = noise_state(bank)
    adj = solve_linear_bsde(bank, lv.P1, lv.P2, lv.G1, lv.G2, lv.H1, lv.H2, f=f,
                            f_mean=mean_of(zt.driver, G, (spec.n,)) if mode == "exact" else None,
                            state=state)
    x, xbar, _, _ = _forward(st, lv, (adj.y, adj.y_mean, adj.z, adj.z_mean, adj.k, adj.k_mean))
    return _pack(st, lv, x, xbar, adj)


# ---------------------------------------------------------------------------
# Continuation
# ---------------------------------------------------------------------------

@dataclass
class LevelRecord:
    alpha: float
    delta: float
    iterations: int
    rhat: float
    residual: float
    damping: float
    accepted: bool


@dataclass
class ContinuationState:
    """Progress of the continuation in ``alpha``."""

    alpha: float = 0.0
    delta: float = DELTA0
    rhat: float = 0.0
    history: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    refresh: LevelRecord | None = None

    def log_rows(self) -> list[dict]:
        return [r.__dict__.copy() for r in self.history if r.accepted]

    @property
    def max_rhat(self) -> float:
        rows = [r.rhat for r in self.history if r.accepted]
        return max(rows) if rows else 0.0


class _LevelMap:
    """Fixed-point map of one level in regression-coefficient space.

    With the regression basis frozen, the adjoint processes are determined
    by their coefficient tracks ``(beta, Zc, Kc)`` and the map
    ``coefficients -> paths -> forward -> backward -> coefficients`` is affine.
    The basis is whitened, so the time-weighted Euclidean norm of the
    coefficients equals the weighted norm of ``(y, z, k)``.
    """

    def __init__(self, st: _Setup, lv: LevelSystem, state: np.ndarray | None):
        self.st, self.lv, self.state = st, lv, state
        grid = st.bank.grid
        self.basis = build_basis(state, grid)
        self.basis.cache(state)
        self.shapes = None
        wt = grid.trapezoid_weights * np.exp(2.0 * st.K * grid.points)
        self._wt = wt
        self.sqrt_w = None

    def _weights(self, coef) -> np.ndarray:
        beta, Zc, Kc = coef
        aw = self.st.bank.marks.atom_weight
        parts = [np.broadcast_to(self._wt[:, None, None], beta.shape),
                 np.broadcast_to(self._wt[:, None, None, None], Zc.shape),
                 np.broadcast_to(self._wt[:, None, None, None] * aw[None, :, None, None], Kc.shape)]
        return np.sqrt(np.concatenate([p.ravel() for p in parts]))

    def flatten(self, coef) -> np.ndarray:
        if self.shapes is None:
            self.shapes = [c.shape for c in coef]
            self.sqrt_w = self._weights(coef)
        return np.concatenate([c.ravel() for c in coef])

    def unflatten(self, vec: np.ndarray) -> tuple:
        out, i = [], 0
        for shp in self.shapes:
            size = int(np.prod(shp))
            out.append(vec[i:i + size].reshape(shp))
            i += size
        return tuple(out)

    def paths(self, vec: np.ndarray) -> tuple:
        bank = self.st.bank
        adj = adjoint_from_coefficients(*self.unflatten(vec), self.basis, self.state,
                                        bank.num_paths, bank.grid)
        return adj.y, adj.y_mean, adj.z, adj.z_mean, adj.k, adj.k_mean

    def norm(self, vec: np.ndarray) -> float:
        return float(np.linalg.norm(self.sqrt_w * vec))

    def __call__(self, adj: tuple) -> tuple[QuadrupleSolution, np.ndarray]:
        x, xbar, _, _ = _forward(self.st, self.lv, adj)
        sol = _backward(self.st, self.lv, x, xbar, state=self.state, basis=self.basis)
        return _pack(self.st, self.lv, x, xbar, sol), self.flatten(sol.coef)


def _solve_level(st: _Setup, lv: LevelSystem, theta: QuadrupleSolution, damping: float, tol: float,
                 max_iter: int, adaptive: bool = True, memory: int = MEMORY):
    """Solve one level by damped fixed-point iteration with Anderson mixing.

    The first step is a plain Picard step from the previous level's paths.
    Afterwards the iteration runs on coefficient vectors ``c``: with
    ``f = T(c) - c`` and the last ``memory`` differences ``dF, dG`` of
    residuals and images, ``c <- T(c) - dG g - (1 - lam)(f - dF g)`` where
    ``g`` minimises ``|f - dF g|``.  A growing residual halves the mixing
    ``lam`` and a residual far above its running minimum clears the history.  With ``memory = 0`` this is the damped
    Picard iteration: the damping is halved when the residual grows and
    doubled (up to 1) after two steps whose implied undamped contraction
    factor is below 1/4; a doubling that slows the contraction is undone.

    Returns ``(solution, converged, iters, rhat, residual, damping, residuals)``.
    """
    state = st.fixed_state if st.fixed_state is not None else st.regression_state(theta.x)
    T = _LevelMap(st, lv, state)
    _, c = T((theta.y, theta.y_mean, theta.z, theta.z_mean, theta.k, theta.k_mean))
    dists: list[float] = []
    lam = damping
    dF: list[np.ndarray] = []
    dG: list[np.ndarray] = []
    f_prev = g_prev = None
    fast, probe = 0, None
    for it in range(1, max_iter + 1):
        cand, g = T(T.paths(c))
        f = g - c
        dist = T.norm(f)
        dists.append(dist)
        if not np.isfinite(dist):
            return theta, False, it, np.inf, dist, lam, dists
        if dist <= tol * max(1.0, T.norm(g)):
            return cand, True, it, _rhat(dists), dist, lam, dists
        grew = len(dists) >= 2 and dists[-1] > dists[-2]
        if memory:
            if f_prev is not None:
                dF.append(f - f_prev)
                dG.append(g - g_prev)
                del dF[:-memory], dG[:-memory]
            if grew:
                lam = max(0.5 * lam, 1.0 / 64.0)
            if dist > 1e3 * min(dists):
                dF.clear()
                dG.clear()
            f_prev, g_prev = f, g
            if dF:
                A = np.stack(dF, axis=1) * T.sqrt_w[:, None]
                gam = np.linalg.lstsq(A, T.sqrt_w * f, rcond=1e-12)[0]
                DF = np.stack(dF, axis=1) @ gam
                DG = np.stack(dG, axis=1) @ gam
                c = g - DG - (1.0 - lam) * (f - DF)
            else:
                c = c + lam * f
            continue
        if grew:
            lam *= 0.5
            fast = 0
            if lam < 1.0 / 64.0:
                return theta, False, it, _rhat(dists), dist, lam, dists
        elif adaptive and len(dists) >= 2:
            ratio = dists[-1] / dists[-2]
            if probe is not None:
                # a larger damping that ends up contracting worse is reverted for good
                if it - probe[0] >= 2 and ratio > probe[1]:
                    lam, adaptive = probe[2], False
            elif lam < 1.0:
                # ratio ~ 1 - lam (1 - r) for an undamped contraction factor r
                r_raw = 1.0 - (1.0 - ratio) / lam
                fast = fast + 1 if r_raw < 0.25 else 0
                if fast >= 2:
                    probe = (it, ratio, lam)
                    lam, fast = min(1.0, 2.0 * lam), 0
        c = c + lam * f
    return theta, False, max_iter, _rhat(dists), dists[-1], lam, dists


def _rhat(dists: list) -> float:
    """Geometric mean of the last (up to three) successive distance ratios."""
    if len(dists) < 2:
        return 0.0
    r = [dists[i + 1] / dists[i] for i in range(max(0, len(dists) - 4), len(dists) - 1) if dists[i] > 0]
    if not r:
        return 0.0
    if any(v == 0 for v in r):
        return 0.0
    return float(np.exp(np.mean(np.log(r))))


def check_continuation_window(spec: ProblemSpec, K: float, k_hat: float = 0.0) -> dict:
    """Validate ``K`` for continuation on a cross-term-free problem.

    Raises :class:`PreconditionError` for nonzero cross terms, ``K >= kappa``
    or a failing base case; warns when ``K`` is outside the guaranteed window
    ``[(kappa1 - kappa2)/2, (kappa1 - kappa2)/2 + k_hat)``.
    """
    from .spectral import compute_kappas

    if spec.cost.has_cross_terms():
        raise PreconditionError("cost has cross terms S, Sbar != 0: continuation requires a "
                                "cross-term-free problem; apply eliminate_cross_terms first "
                                "(the untransformed window is not guaranteed)")
    k1, k2, kappa = compute_kappas(spec)
    if not K < kappa:
        raise PreconditionError(f"K={K:.6g} >= kappa={kappa:.6g}: solvability window (K < kappa) "
                                f"violated")
    _check_base_window(K, k1, k2)
    start = 0.5 * (k1 - k2)
    guaranteed = start <= K < start + max(k_hat, 0.0) or abs(K - start) <= 1e-12 * max(1.0, abs(start))
    if not guaranteed:
        warnings.warn(f"K={K:.6g} outside the guaranteed continuation window "
                      f"[{start:.6g}, {start + k_hat:.6g}); contraction is monitored empirically",
                      WindowWarning, stacklevel=3)
    return {"kappa1": k1, "kappa2": k2, "kappa": kappa, "start": start, "guaranteed": guaranteed}


def continuation_solve(spec: ProblemSpec, bank: NoiseBank, xi=None, K: float | None = None,
                       zeta: ForcingTuple | None = None, delta0: float = DELTA0,
                       damping: float = DAMPING, tol: float = TOL_PICARD, mode: str = "exact",
                       max_iter: int = MAX_ITER, k_hat: float = 0.0,
                       extra_state: np.ndarray | None = None, adaptive_damping: bool = True,
                       fixed_state: np.ndarray | None = None, check_window: bool = True,
                       refresh: bool = True,
                       memory: int = MEMORY) -> tuple[QuadrupleSolution, ContinuationState]:
    """Solve the coupled system at ``alpha = 1`` by continuation from ``alpha = 0``.

    Parameters
    ----------
    spec : ProblemSpec
        Must have ``S = Sbar = 0`` (see :func:`eliminate_cross_terms`).
    bank : NoiseBank
    xi : initial state (vector or ``(M, n)`` paths); defaults to the spec's law
    K : weight exponent (defaults to ``spec.K``)
    zeta : forcing carried through every level (zero by default)
    delta0 : initial and maximal alpha step
    damping : Picard damping ``lam`` in ``new = lam * candidate + (1 - lam) * old``
    tol : relative Picard tolerance in the weighted norm
    mode : "exact" or "empirical" mean handling
    max_iter : Picard iteration cap per level
    k_hat : estimated contraction margin defining the guaranteed window
    extra_state : additional adapted regressors for the backward solves
    adaptive_damping : allow the damping to grow when the iteration contracts fast
    fixed_state : regression state used for every backward solve instead of
        the state paths; the solution is then exactly linear in the data
    check_window : refuse specs outside the solvability window
    refresh : re-solve at ``alpha = 1`` with the regression basis rebuilt
        from the converged state (the basis is otherwise frozen per level)
    memory : Anderson history length per level (0 gives damped Picard)

    Returns
    -------
    solution, state
    """
    K = spec.K if K is None else float(K)
    if check_window:
        check_continuation_window(spec, K, k_hat)
    elif spec.cost.has_cross_terms():
        raise PreconditionError("cost has cross terms S, Sbar != 0; apply eliminate_cross_terms first")
    st = _setup(spec, bank, xi, zeta, K, mode, extra_state)
    st.fixed_state = fixed_state
    theta = solve_base_case(spec, bank, xi=st.xi if xi is not None else None, zeta=zeta, K=K,
                            mode=mode, extra_state=extra_state, fixed_state=fixed_state)
    state = ContinuationState(alpha=0.0, delta=float(delta0))
    state.history.append(LevelRecord(0.0, 0.0, 1, 0.0, 0.0, damping, True))
    fast_streak = 0
    while state.alpha < 1.0:
        a_try = min(1.0, round(state.alpha + state.delta, 12))
        if 1.0 - a_try < 1e-12:
            a_try = 1.0
        lv = assemble_level(spec, a_try, K, st.kappa1, st.kappa2)
        # the basis is frozen within a level so that the level map is affine
        new, ok, iters, rhat, dist, lam, dists = _solve_level(st, lv, theta, damping, tol, max_iter,
                                                              adaptive_damping, memory)
        rec = LevelRecord(a_try, state.delta, iters, rhat, dist, lam, ok and rhat < 1.0)
        state.history.append(rec)
        state.distances.append(dists)
        if rec.accepted:
            theta = new
            state.alpha = a_try
            state.rhat = rhat
            log.info("alpha=%.4f delta=%.4g iters=%d rhat=%.3f", a_try, state.delta, iters, rhat)
            if rhat >= SLOW_RATIO:
                state.delta *= 0.5
                fast_streak = 0
            elif rhat < FAST_RATIO:
                fast_streak += 1
                if fast_streak >= 2:
                    state.delta = min(2.0 * state.delta, delta0)
                    fast_streak = 0
            else:
                fast_streak = 0
        else:
            state.delta *= 0.5
            fast_streak = 0
            log.info("alpha=%.4f rejected (iters=%d, rhat=%.3f); delta -> %.4g",
                     a_try, iters, rhat, state.delta)
        if state.delta < DELTA_MIN:
            raise NumericalError(f"no contraction at alpha={state.alpha:.6g} "
                                 f"(step underflow below {DELTA_MIN:g})")
    if fixed_state is None and refresh:
        # one more pass at alpha = 1 with the basis built from the converged state
        lv = assemble_level(spec, 1.0, K, st.kappa1, st.kappa2)
        new, ok, iters, rhat, dist, lam, dists = _solve_level(st, lv, theta, damping, tol, max_iter,
                                                              adaptive_damping, memory)
        state.refresh = LevelRecord(1.0, 0.0, iters, rhat, dist, lam, ok and rhat < 1.0)
        if state.refresh.accepted:
            theta = new
        else:
            log.warning("basis refresh at alpha=1 did not converge; keeping the level solution")
    theta.alpha = 1.0
    return theta, state


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

@dataclass
class ResidualReport:
    forward: float
    backward: float

    def to_dict(self) -> dict:
        return {"forward": self.forward, "backward": self.backward}


def fbsde_residual(spec: ProblemSpec, sol: QuadrupleSolution, K: float | None = None,
                   zeta: ForcingTuple | None = None) -> ResidualReport:
    """Residuals of the discrete Hamiltonian system at ``alpha = 1``.

    The forward residual re-steps the Euler recursion from ``x(t0)`` with the
    solution's adjoint processes and reports the maximal deviation relative
    to ``max(1, max|x|)``.  The backward residual accumulates the local
    backward Euler identity from the horizon and reports its weighted norm
    relative to that of ``y``.
    """
    from .backward import bsde_residual
    from .spectral import compute_kappas

    K = sol.K if K is None else float(K)
    k1, k2, _ = compute_kappas(spec)
    bank = sol.bank
    mode = sol.info.get("mode", "exact")
    st = _Setup(spec, bank, K, sol.x[:, 0].copy(), sol.x_mean[0].copy(), zeta or ForcingTuple(),
                mode, None, k1, k2)
    lv = assemble_level(spec, 1.0, K, k1, k2)
    x, _, _, _ = _forward(st, lv, (sol.y, sol.y_mean, sol.z, sol.z_mean, sol.k, sol.k_mean))
    fwd = float(np.max(np.abs(x - sol.x)) / max(1.0, float(np.max(np.abs(sol.x)))))
    M, G, n = bank.num_paths, bank.grid.size, spec.n
    zt = st.zeta
    f = (apply_track(lv.Qc1, sol.x - sol.x_mean)
         + np.einsum("kab,kb->ka", lv.Qc2, sol.x_mean) + paths_view(zt.driver, M, G, (n,)))
    f_mean = np.einsum("kab,kb->ka", lv.Qc2, sol.x_mean) + mean_of(zt.driver, G, (n,))
    adj = AdjointSolution(sol.y, sol.z, sol.k, sol.y_mean, sol.z_mean, sol.k_mean, bank.grid, K,
                          np.zeros(0))
    bwd = bsde_residual(adj, bank, lv.P1, lv.P2, lv.G1, lv.G2, lv.H1, lv.H2, f=f,
                        f_mean=f_mean if mode == "exact" else None, K=K)
    return ResidualReport(fwd, bwd)


@dataclass
class StabilityReport:
    ratio: float
    numerator: float
    denominator: float
    skipped: bool = False


def stability_ratio(sol_a: QuadrupleSolution, sol_b: QuadrupleSolution) -> StabilityReport:
    """``[E|dy(t0) e^{K t0}|^2 + |d theta|^2] / E|dx(t0) e^{K t0}|^2`` for two solutions
    on the same noise; a zero denominator is flagged and skipped."""
    K = sol_a.K
    g = sol_a.bank.grid
    w0 = np.exp(2.0 * K * g.t0)
    dx0 = sol_a.x[:, 0] - sol_b.x[:, 0]
    den = w0 * float(np.mean(np.einsum("mi,mi->m", dx0, dx0)))
    dy0 = sol_a.y[:, 0] - sol_b.y[:, 0]
    num = w0 * float(np.mean(np.einsum("mi,mi->m", dy0, dy0))) + sol_a.distance(sol_b) ** 2
    if den == 0.0:
        return StabilityReport(float("nan"), num, den, True)
    return StabilityReport(num / den, num, den)


def stability_constant(spec: ProblemSpec, bank: NoiseBank, K: float | None = None, **kw) -> tuple:
    """Fit the stability constant by linearity.

    Solves the homogeneous system for each unit initial vector, forms the
    Gram matrix of the solution map and returns ``(lam_max, gram, solutions)``.
    For any deterministic initial difference ``v`` the stability ratio equals
    ``v^T gram v / |v|^2 <= lam_max``.
    """
    K = spec.K if K is None else float(K)
    n = spec.n
    sols = []
    for a in range(n):
        e = np.zeros(n)
        e[a] = 1.0
        sol, _ = continuation_solve(spec, bank, xi=e, K=K, **kw)
        sols.append(sol)
    g = bank.grid
    w0 = np.exp(2.0 * K * g.t0)
    gram = np.empty((n, n))
    for a in range(n):
        for b in range(a, n):
            sa, sb = sols[a], sols[b]
            val = w0 * float(np.mean(np.einsum("mi,mi->m", sa.y[:, 0], sb.y[:, 0])))
            for u, v, marks in ((sa.x, sb.x, None), (sa.y, sb.y, None), (sa.z, sb.z, None),
                                (sa.k, sb.k, bank.marks)):
                uu = u.reshape(u.shape[0], u.shape[1], -1)
                vv = v.reshape(v.shape[0], v.shape[1], -1)
                if marks is not None and u.shape[2]:
                    prod = np.einsum("mkpi,mkpi,p->mk", u, v, marks.atom_weight)
                else:
                    prod = np.einsum("mki,mki->mk", uu, vv)
                val += float(np.mean(prod @ (g.trapezoid_weights * np.exp(2.0 * K * g.points))))
            gram[a, b] = gram[b, a] = val
    return float(np.linalg.eigvalsh(gram)[-1]), gram, sols


def estimate_contraction_margin(spec: ProblemSpec, bank: NoiseBank, K_values, **kw) -> float:
    """Empirical contraction margin above the guaranteed window start.

    Runs the continuation for each ``K`` in ``K_values`` (ascending) and
    returns the largest ``K - start`` for which every level contracted
    (``rhat < 1``), or 0 when none did.
    """
    from .spectral import compute_kappas

    k1, k2, _ = compute_kappas(spec)
    start = 0.5 * (k1 - k2)
    best = 0.0
    for K in sorted(K_values):
        if K < start:
            continue
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", WindowWarning)
                _, state = continuation_solve(spec, bank, K=K, **kw)
        except (NumericalError, PreconditionError):
            break
        if state.max_rhat < 1.0:
            best = K - start
        else:
            break
    return best


def solution_decay(sol: QuadrupleSolution, tol: float = 1e-6) -> dict:
    g = sol.bank.grid
    return {"x": decay_profile(sol.x, g, sol.K, tol), "y": decay_profile(sol.y, g, sol.K, tol)}

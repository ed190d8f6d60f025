"""Forward mean-field SDEs with jumps: noise, Euler-Maruyama simulation and
the global integrability estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericalError, PreconditionError
from .model import (ControlProcess, FeedbackControl, ForcingTuple, MarkMeasure, ProblemSpec,
                    TimeGrid, empirical_mean)

CHUNK_STEPS = 256
MEAN_MODES = ("exact", "empirical")


class NoiseBank:
    """Common random numbers for a path ensemble.

    Increments are generated in fixed blocks of ``CHUNK_STEPS`` steps, each
    from its own child stream of ``seed``.  A bank on a longer grid therefore
    extends a shorter one with the same seed step for step.

    Parameters
    ----------
    seed : int
        64-bit seed.
    num_paths : int
    grid : TimeGrid
    d : int
        Brownian dimension.
    marks : MarkMeasure, optional
    """

    def __init__(self, seed: int, num_paths: int, grid: TimeGrid, d: int,
                 marks: MarkMeasure | None = None):
        if num_paths < 1:
            raise ValueError("no paths")
        self.seed = int(seed)
        self.num_paths = int(num_paths)
        self.grid = grid
        self.d = int(d)
        self.marks = marks if marks is not None else MarkMeasure()
        self._generate()

    @classmethod
    def for_spec(cls, spec: ProblemSpec, seed: int, num_paths: int) -> "NoiseBank":
        return cls(seed, num_paths, spec.grid, spec.d, spec.marks)

    def _generate(self) -> None:
        M, N, d = self.num_paths, self.grid.num_steps, self.d
        P = self.marks.num_atoms
        dt = self.grid.dt
        sqdt = np.sqrt(dt)
        self.dW = np.empty((M, N, d))
        self.counts = np.zeros((M, N, P), dtype=np.int64)
        lam = self.marks.intensities
        for c, start in enumerate(range(0, N, CHUNK_STEPS)):
            stop = min(start + CHUNK_STEPS, N)
            L = stop - start
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(1, c))))
            self.dW[:, start:stop] = sqdt * rng.standard_normal((M, CHUNK_STEPS, d))[:, :L]
            offset = 0
            for j, w in enumerate(self.marks.weights):
                Kj = w.size
                events = rng.poisson(lam[j] * dt, size=(M, CHUNK_STEPS))
                if lam[j] > 0:
                    split = rng.multinomial(events, w / lam[j])
                    self.counts[:, start:stop, offset:offset + Kj] = split[:, :L]
                offset += Kj
        self.dNt = self.counts - self.marks.atom_weight * dt

    def initial_states(self, spec: ProblemSpec) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(0,))))
        return spec.x0_law.sample(self.num_paths, rng)

    def brownian_paths(self) -> np.ndarray:
        """Brownian paths ``W(s_k) - W(t0)`` of shape ``(M, G, d)``."""
        W = np.zeros((self.num_paths, self.grid.size, self.d))
        np.cumsum(self.dW, axis=1, out=W[:, 1:])
        return W

    def compensated_paths(self) -> np.ndarray:
        """Compensated counting processes per atom, shape ``(M, G, P)``."""
        Nt = np.zeros((self.num_paths, self.grid.size, self.marks.num_atoms))
        np.cumsum(self.dNt, axis=1, out=Nt[:, 1:])
        return Nt

    def event_steps(self, path: int) -> list[tuple[int, int, int]]:
        """Jump events of one path as ``(step, atom, count)`` triples."""
        k, p = np.nonzero(self.counts[path])
        return [(int(a), int(b), int(self.counts[path, a, b])) for a, b in zip(k, p)]


@dataclass
class PathEnsemble:
    """Simulated state paths with their mean track.

    Attributes
    ----------
    states : (M, G, n)
    mean_track : (G, n) exact (ODE) or empirical mean fed into the dynamics
    bank : NoiseBank
    mode : "exact" or "empirical"
    control : ControlProcess or None
    """

    states: np.ndarray
    mean_track: np.ndarray
    bank: NoiseBank
    mode: str = "exact"
    control: ControlProcess | None = None
    info: dict = field(default_factory=dict)

    @property
    def num_paths(self) -> int:
        return self.states.shape[0]

    @property
    def grid(self) -> TimeGrid:
        return self.bank.grid


# ---------------------------------------------------------------------------
# Generic linear forward recursion
# ---------------------------------------------------------------------------

def paths_view(arr, M: int, G: int, trail: tuple) -> np.ndarray:
    """Broadcast ``None``, a ``(G,)+trail`` track or an ``(M, G)+trail`` array to paths."""
    if arr is None:
        return np.broadcast_to(0.0, (M, G) + trail)
    arr = np.asarray(arr, dtype=float)
    if arr.shape == (G,) + trail:
        return np.broadcast_to(arr, (M, G) + trail)
    if arr.shape == (M, G) + trail:
        return arr
    raise ValueError(f"forcing shape {arr.shape} matches neither {(G,) + trail} nor {(M, G) + trail}")


def mean_of(arr, G: int, trail: tuple) -> np.ndarray:
    """Mean track of a forcing given as ``None``, a track or per-path array."""
    if arr is None:
        return np.zeros((G,) + trail)
    arr = np.asarray(arr, dtype=float)
    if arr.shape == (G,) + trail:
        return arr
    return empirical_mean(arr)


def _first_bad(x: np.ndarray) -> tuple[int, int]:
    bad = ~np.isfinite(x.reshape(x.shape[0], x.shape[1], -1)).all(axis=2)
    steps = np.where(bad.any(axis=0))[0]
    k = int(steps[0])
    m = int(np.where(bad[:, k])[0][0])
    return m, k


def run_linear_forward(bank: NoiseBank, x0: np.ndarray, x0_mean: np.ndarray,
                       F, Fb, f, fbar, G, Gb, g, H, Hb, h, mode: str = "exact"):
    """Simulate ``dx = (F x + Fb xbar + f) ds + (G x + Gb xbar + g) dW + (H x + Hb xbar + h) dNt``.

    Coefficient tracks have a leading grid axis of length ``G`` (only the
    first ``num_steps`` entries are used).  ``f, g, h`` are per-path arrays
    (possibly broadcast views) of shape ``(M, G, ...)``; ``fbar`` is the
    exact mean of ``f`` used by the mean ODE in exact mode.

    Returns
    -------
    x : (M, G, n), xbar : (G, n)
    """
    if mode not in MEAN_MODES:
        raise ValueError(f"mean mode must be one of {MEAN_MODES}, got {mode!r}")
    N = bank.grid.num_steps
    dt = bank.grid.dt
    args = (x0, F[:N], Fb[:N], f[:, :N], G[:N], Gb[:N], g[:, :N], H[:N], Hb[:N], h[:, :N],
            bank.dW, bank.dNt)
    with np.errstate(all="ignore"):
        if mode == "exact":
            xbar = kernels.mean_ode(F[:N] + Fb[:N], fbar[:N], x0_mean, dt)
            x = kernels.euler_paths(*args, xbar, dt)
        else:
            x, xbar = kernels.euler_paths_empirical(*args, dt)
    if not np.all(np.isfinite(x)):
        m, k = _first_bad(x)
        raise NumericalError(f"non-finite state at path {m}, step {k} (s={bank.grid.points[k]:.6g})")
    return x, xbar


def simulate_mfsde(spec: ProblemSpec, bank: NoiseBank,
                   control: ControlProcess | FeedbackControl | None = None,
                   forcing: ForcingTuple | None = None, mode: str = "exact",
                   x0: np.ndarray | None = None) -> PathEnsemble:
    """Euler-Maruyama simulation of the controlled mean-field SDE with jumps.

    Parameters
    ----------
    spec : ProblemSpec
    bank : NoiseBank
        Common random numbers; must live on ``spec.grid``.
    control : ControlProcess or FeedbackControl, optional
        Open-loop process or affine feedback on the grid (zero if omitted).
    forcing : ForcingTuple, optional
        Uses the ``drift`` (b), ``diffusion`` (sigma) and ``jump`` (gamma) entries.
    mode : {"exact", "empirical"}
        Mean of the state from the deterministic mean ODE, or from the path
        average at each step.
    x0 : ndarray, optional
        Initial states ``(M, n)`` or a single vector; defaults to ``spec.x0_law``.
    """
    if bank.grid != spec.grid:
        raise ValueError("noise bank and problem spec live on different grids")
    c, M_ = spec.coeffs, bank.num_paths
    n, m, d, P, G_ = spec.n, spec.m, spec.d, spec.marks.num_atoms, spec.grid.size
    forcing = forcing or ForcingTuple()
    if x0 is None:
        x0_paths = bank.initial_states(spec)
        x0_mean = np.asarray(spec.x0_law.mean, dtype=float)
    else:
        x0 = np.asarray(x0, dtype=float)
        x0_paths = np.broadcast_to(x0, (M_, n)).copy() if x0.ndim == 1 else x0
        x0_mean = x0 if x0.ndim == 1 else empirical_mean(x0)

    F, Fb = c.A, c.Abar
    Gm, Gbm = c.C, c.Cbar
    Hm, Hbm = c.M, c.Mbar
    b = paths_view(forcing.drift, M_, G_, (n,))
    sig = paths_view(forcing.diffusion, M_, G_, (d, n))
    gam = paths_view(forcing.jump, M_, G_, (P, n))
    bbar = mean_of(forcing.drift, G_, (n,))
    if isinstance(control, FeedbackControl):
        Kg, Kgb = control.gain, control.gain_bar
        Ksum = Kg + Kgb
        F = F + c.B @ Kg
        Fb = Fb + c.B @ Kgb + c.Bbar @ Ksum
        Gm = Gm + np.einsum("kiab,kbc->kiac", c.D, Kg)
        Gbm = Gbm + np.einsum("kiab,kbc->kiac", c.D, Kgb) + np.einsum("kiab,kbc->kiac", c.Dbar, Ksum)
        Hm = Hm + np.einsum("kpab,kbc->kpac", c.N, Kg)
        Hbm = Hbm + np.einsum("kpab,kbc->kpac", c.N, Kgb) + np.einsum("kpab,kbc->kpac", c.Nbar, Ksum)
        if control.offset is not None:
            off = np.asarray(control.offset, dtype=float)
            B2, D2, N2 = c.B + c.Bbar, c.D + c.Dbar, c.N + c.Nbar
            b = b + np.einsum("kab,kb->ka", B2, off)
            bbar = bbar + np.einsum("kab,kb->ka", B2, off)
            sig = sig + np.einsum("kiab,kb->kia", D2, off)
            gam = gam + np.einsum("kpab,kb->kpa", N2, off)
    elif control is not None:
        u, ubar = control.paths, control.mean
        if u.shape != (M_, G_, m):
            raise ValueError(f"control must have shape {(M_, G_, m)}, got {u.shape}")
        b = b + np.einsum("kab,mkb->mka", c.B, u) + np.einsum("kab,kb->ka", c.Bbar, ubar)
        bbar = bbar + np.einsum("kab,kb->ka", c.B + c.Bbar, ubar)
        if d:
            sig = sig + np.einsum("kiab,mkb->mkia", c.D, u) + np.einsum("kiab,kb->kia", c.Dbar, ubar)
        if P:
            gam = gam + np.einsum("kpab,mkb->mkpa", c.N, u) + np.einsum("kpab,kb->kpa", c.Nbar, ubar)
    x, xbar = run_linear_forward(bank, x0_paths, x0_mean, F, Fb, b, bbar, Gm, Gbm, sig, Hm, Hbm, gam,
                                 mode)
    ctrl = control if isinstance(control, ControlProcess) else None
    if isinstance(control, FeedbackControl):
        u = np.einsum("kab,mkb->mka", control.gain, x) + np.einsum("kab,kb->ka", control.gain_bar, xbar)
        umean = np.einsum("kab,kb->ka", control.gain + control.gain_bar, xbar)
        if control.offset is not None:
            u = u + control.offset
            umean = umean + control.offset
        ctrl = ControlProcess(u, umean)
    return PathEnsemble(x, xbar, bank, mode, ctrl)


# ---------------------------------------------------------------------------
# Estimates
# ---------------------------------------------------------------------------

@dataclass
class EstimateReport:
    """Monte Carlo check of an a priori inequality ``LHS <= RHS``.

    ``slack = RHS - LHS``; ``se`` is the standard error of the per-path
    differences, and the check passes when ``LHS - RHS <= 3 se`` (plus a
    rounding allowance).
    """

    lhs: float
    rhs: float
    se: float
    epsilon: float
    K: float
    passed: bool
    constants: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "slack": self.slack, "se": self.se,
                "epsilon": self.epsilon, "K": self.K, "passed": self.passed, **self.constants}


def mc_verdict(diff: np.ndarray, scale: float) -> tuple[float, float, bool]:
    """Mean, standard error and 3-sigma verdict for per-path ``LHS - RHS``."""
    M = diff.size
    mean = float(empirical_mean(diff))
    se = float(np.std(diff, ddof=1) / np.sqrt(M)) if M > 1 else 0.0
    return mean, se, bool(mean <= 3.0 * se + 1e-12 * max(scale, 1e-300))


def _time_weights(grid: TimeGrid, K: float) -> np.ndarray:
    return grid.trapezoid_weights * np.exp(2.0 * K * grid.points)


def check_sde_estimate(spec: ProblemSpec, ensemble: PathEnsemble, forcing: ForcingTuple | None,
                       K: float, eps: float | None = None) -> EstimateReport:
    """Check the integrability estimate of the forward equation.

    Evaluates, path by path on the truncated grid,

    ``LHS = (-2K + 2 kappa - 3 eps) E int |x e^{Ks}|^2``

    ``RHS = L1 E|x(t0) e^{K t0}|^2 + E int [ L1/eps |b|^2 + (2 + |C^1|^2/eps) |sigma|^2
    + (2 + |M^1|_rho^2/eps) |gamma|_rho^2 ] e^{2Ks}``

    with ``L1 = 1 + 2 sup(|C^2|^2 + |M^2|_rho^2) / (-2K + 2 kappa_1 - eps)``.
    The default ``eps`` is the midpoint of ``(0, (2 kappa - 2K)/3)``.
    """
    from .spectral import compute_kappas, sup_norms

    k1, k2, kappa = compute_kappas(spec)
    if not K < kappa:
        raise PreconditionError(f"K={K:.6g} >= kappa={kappa:.6g}: forward integrability window "
                                f"(K < kappa) violated")
    hi = (2.0 * kappa - 2.0 * K) / 3.0
    eps = 0.5 * hi if eps is None else float(eps)
    if not 0.0 < eps < hi:
        raise PreconditionError(f"eps={eps:.6g} outside (0, (2 kappa - 2K)/3) = (0, {hi:.6g})")
    norms = sup_norms(spec)
    L1 = 1.0 + 2.0 * norms["sup_C2_M2"] / (-2.0 * K + 2.0 * k1 - eps)
    grid, M_ = spec.grid, ensemble.num_paths
    n, d, P = spec.n, spec.d, spec.marks.num_atoms
    forcing = forcing or ForcingTuple()
    w = _time_weights(grid, K)
    x = ensemble.states
    lhs_m = (-2.0 * K + 2.0 * kappa - 3.0 * eps) * (np.einsum("mki,mki->mk", x, x) @ w)
    rhs_m = L1 * np.exp(2.0 * K * grid.t0) * np.einsum("mi,mi->m", x[:, 0], x[:, 0])
    b = paths_view(forcing.drift, M_, grid.size, (n,))
    sig = paths_view(forcing.diffusion, M_, grid.size, (d, n))
    gam = paths_view(forcing.jump, M_, grid.size, (P, n))
    cb = L1 / eps
    cs = 2.0 + norms["C1_sq"] / eps
    cg = 2.0 + norms["M1_sq"] / eps
    integrand = cb * np.einsum("mki,mki->mk", b, b)
    if d:
        integrand = integrand + cs * np.einsum("mkij,mkij->mk", sig, sig)
    if P:
        integrand = integrand + cg * spec.marks.fibre_norm_sq(gam)
    rhs_m = rhs_m + integrand @ w
    diff = lhs_m - rhs_m
    _, se, ok = mc_verdict(diff, float(np.mean(np.abs(rhs_m))))
    return EstimateReport(float(empirical_mean(lhs_m)), float(empirical_mean(rhs_m)), se, eps, K, ok,
                          {"L1": L1, "kappa": kappa, "kappa1": k1, "kappa2": k2})


@dataclass
class DecayReport:
    """Profile ``m(s) = E|p(s) e^{Ks}|^2`` and its tail behaviour."""

    profile: np.ndarray
    initial: float
    tail_average: float
    terminal_ratio: float
    decayed: bool

    def to_dict(self) -> dict:
        return {"initial": self.initial, "tail_average": self.tail_average,
                "terminal_ratio": self.terminal_ratio, "decayed": self.decayed}


def decay_profile(paths: np.ndarray, grid: TimeGrid, K: float, tol: float = 1e-6) -> DecayReport:
    """Tail diagnostics of ``E|p(s) e^{Ks}|^2`` for a ``(M, G, ...)`` array."""
    flat = paths.reshape(paths.shape[0], paths.shape[1], -1)
    prof = empirical_mean(np.einsum("mki,mki->mk", flat, flat)) * np.exp(2.0 * K * grid.points)
    init = float(prof[0])
    tail = float(np.mean(prof[-max(1, grid.size // 10):]))
    ref = init if init > 0 else float(np.max(prof))
    if ref == 0.0:
        return DecayReport(prof, init, tail, 0.0, True)
    ratio = float(prof[-1] / ref)
    return DecayReport(prof, init, tail, ratio, bool(tail <= tol * ref))


def check_decay(ensemble: PathEnsemble, K: float, tol: float = 1e-6) -> DecayReport:
    """Decay of ``E|x(s) e^{Ks}|^2``; ``decayed`` is False when the tail
    average over the last tenth of the grid exceeds ``tol`` times the
    initial value (a sign the path is not in the weighted space)."""
    return decay_profile(ensemble.states, ensemble.grid, K, tol)

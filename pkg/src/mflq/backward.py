"""Mean-field BSDEs with jumps on a truncated horizon.

The solution is computed by least-squares Monte Carlo in coefficient space.
At every grid point the regression basis is ``phi_k = (1, psi_k)`` where
``psi_k`` are empirically whitened fluctuations of an attached adapted state
(the forward process, or the driving noise).  Writing ``y_k = beta_k phi_k``
makes column 0 of ``beta_k`` exactly the mean part, which follows the
deterministic mean equation, while the remaining columns carry the
fluctuation part.  Both are advanced by one implicit backward Euler
recursion, so the mean and fluctuation equations are solved jointly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericalError, PreconditionError
from .forward import EstimateReport, NoiseBank, decay_profile, mc_verdict, mean_of, paths_view
from .model import ProblemSpec, TimeGrid, empirical_mean, weighted_norm

DROP_TOL = 1e-20
COND_LIMIT = 1e10
CHUNK = 512
POOL_EVENTS = 10
RIDGE = 1e-12
CORR_DROP = 1e-8
CACHE_LIMIT = 20_000_000


class RegressionWarning(UserWarning):
    """Emitted when an ill-conditioned basis falls back to the constant basis."""


@dataclass
class Basis:
    """Whitened affine regression basis on the grid.

    ``psi_k = W_k (s_k - mean_k)`` with ``E[psi_k psi_k^T] = I`` on the kept
    directions; dropped (degenerate) directions are rows of zeros.
    """

    mean: np.ndarray      # (G, q)
    white: np.ndarray     # (G, q, q)
    fallback_steps: int = 0
    dropped: int = 0

    @property
    def size(self) -> int:
        return 1 + self.mean.shape[1]

    def evaluate(self, state: np.ndarray | None, k0: int = 0, k1: int | None = None) -> np.ndarray:
        """Basis values ``(M, k1 - k0, p)`` on a block of grid points."""
        return self.evaluate_t(state, k0, k1).transpose(1, 0, 2)

    def cache(self, state: np.ndarray | None) -> None:
        """Precompute all basis values when they fit in ``CACHE_LIMIT`` floats."""
        self._cached = None
        if state is None or self.mean.shape[1] == 0:
            return
        if state.shape[0] * state.shape[1] * self.size <= CACHE_LIMIT:
            self._cached = self.evaluate_t(state)

    def evaluate_t(self, state: np.ndarray | None, k0: int = 0, k1: int | None = None) -> np.ndarray:
        """Time-major basis values ``(k1 - k0, M, p)``."""
        k1 = self.mean.shape[0] if k1 is None else k1
        cached = getattr(self, "_cached", None)
        if cached is not None:
            return cached[k0:k1]
        if state is None or self.mean.shape[1] == 0:
            M = 1 if state is None else state.shape[0]
            return np.ones((k1 - k0, M, 1))
        L, M = k1 - k0, state.shape[0]
        out = np.empty((L, M, self.size))
        out[:, :, 0] = 1.0
        fl = state[:, k0:k1].transpose(1, 0, 2) - self.mean[k0:k1, None, :]
        np.matmul(fl, self.white[k0:k1].transpose(0, 2, 1), out=out[:, :, 1:])
        return out


def build_basis(state: np.ndarray | None, grid: TimeGrid) -> Basis:
    """Whitened basis from an adapted ``(M, G, q)`` state (constant if ``None``)."""
    if state is None:
        return Basis(np.zeros((grid.size, 0)), np.zeros((grid.size, 0, 0)))
    M, G, q = state.shape
    mean = empirical_mean(state)
    cov = np.empty((G, q, q))
    for k0 in range(0, G, CHUNK):
        fl = state[:, k0:k0 + CHUNK].transpose(1, 0, 2) - mean[k0:k0 + CHUNK, None, :]
        cov[k0:k0 + CHUNK] = fl.transpose(0, 2, 1) @ fl / M
    # numerically constant components are dropped; collinearity is judged on
    # the correlation matrix so that differing scales do not count against it
    var = np.einsum("kaa->ka", cov).copy()
    live = var > DROP_TOL * (var + mean * mean) + np.finfo(float).tiny
    sd = np.where(live, np.sqrt(np.where(live, var, 1.0)), 1.0)
    corr = cov / (sd[:, :, None] * sd[:, None, :])
    corr = np.where(live[:, :, None] & live[:, None, :], corr, 0.0)
    vals, vecs = np.linalg.eigh(corr)
    keep = vals > CORR_DROP
    dropped = int(np.sum(~keep))
    white = np.zeros((G, q, q))
    fallback = 0
    for k in range(G):
        kv = keep[k]
        if not kv.any():
            continue
        v = vals[k, kv]
        if v.max() / v.min() > COND_LIMIT:
            fallback += 1
            continue
        white[k][: kv.sum()] = (vecs[k][:, kv] / np.sqrt(v)).T / sd[k][None, :]
    if fallback:
        warnings.warn(f"regression basis ill-conditioned at {fallback} grid points; "
                      f"constant basis used there", RegressionWarning, stacklevel=3)
    return Basis(mean, white, fallback, dropped)


@dataclass
class AdjointSolution:
    """Solution ``(y, z, k)`` of a linear mean-field BSDE on the grid.

    Attributes
    ----------
    y : (M, G, n)
    z : (M, G, d, n)
    k : (M, G, P, n) per mark atom
    y_mean, z_mean, k_mean : mean tracks (column 0 of the coefficients)
    A_K : (G, n, n) the shifted drift ``A + 2K I`` when built from a spec
    beta : (G, n, p) coefficients of ``y`` in the regression basis
    """

    y: np.ndarray
    z: np.ndarray
    k: np.ndarray
    y_mean: np.ndarray
    z_mean: np.ndarray
    k_mean: np.ndarray
    grid: TimeGrid
    K: float
    beta: np.ndarray
    A_K: np.ndarray | None = None
    info: dict = field(default_factory=dict)
    coef: tuple | None = field(default=None, repr=False)

    @property
    def num_paths(self) -> int:
        return self.y.shape[0]


def _pool_window(bank: NoiseBank, p: int) -> int:
    """Steps per pooling window so that each window sees about ``POOL_EVENTS * p`` jumps per atom."""
    w = bank.marks.atom_weight
    w = w[w > 0]
    if not w.size:
        return 1
    per_step = bank.num_paths * float(w.min()) * bank.grid.dt
    return int(min(max(1, bank.grid.num_steps), max(1, np.ceil(POOL_EVENTS * p / per_step))))


def _moving_sum(a: np.ndarray, width: int) -> np.ndarray:
    """Centred moving sum along axis 0, truncated at the ends."""
    if width <= 1:
        return a
    N = a.shape[0]
    cs = np.concatenate([np.zeros((1,) + a.shape[1:]), np.cumsum(a, axis=0)])
    lo = np.clip(np.arange(N) - width // 2, 0, N)
    hi = np.clip(lo + width, 0, N)
    lo = np.clip(hi - width, 0, N)
    return cs[hi] - cs[lo]


def _ridge_solve(XtX: np.ndarray, XtY: np.ndarray) -> np.ndarray:
    q = XtX.shape[-1]
    tr = np.trace(XtX, axis1=1, axis2=2)
    ridge = RIDGE * tr / q + np.finfo(float).tiny
    return np.linalg.solve(XtX + ridge[:, None, None] * np.eye(q), XtY)


def _products(noise: np.ndarray, cur_t: np.ndarray) -> np.ndarray:
    """Design ``noise_c * phi_j`` as ``(L, M, c * p)``."""
    L, M, c = noise.shape
    return (noise[:, :, :, None] * cur_t[:, :, None, :]).reshape(L, M, c * cur_t.shape[2])


def _fixed_coordinates(basis: Basis, state, p: int):
    """Affine maps between the whitened basis and fixed standardised coordinates.

    Returns ``to_r`` with ``r_k = to_r[k] phi_k`` and ``to_phi`` with
    ``phi_k = to_phi[k] r_k`` (exact on the kept directions).
    """
    G = basis.mean.shape[0]
    if state is None or p == 1:
        one = np.ones((G, 1, 1))
        return one, one
    q = p - 1
    mu = empirical_mean(state.reshape(-1, q))
    sig = np.sqrt(np.maximum(empirical_mean((state.reshape(-1, q) - mu) ** 2), 0.0))
    sig = np.where(sig > 0, sig, 1.0)
    W = basis.white
    Wp = np.linalg.pinv(W)
    to_r = np.zeros((G, p, p))
    to_r[:, 0, 0] = 1.0
    to_r[:, 1:, 0] = (basis.mean - mu) / sig
    to_r[:, 1:, 1:] = Wp / sig[None, :, None]
    to_phi = np.zeros((G, p, p))
    to_phi[:, 0, 0] = 1.0
    to_phi[:, 1:, 0] = np.einsum("kab,kb->ka", W, mu - basis.mean)
    to_phi[:, 1:, 1:] = W * sig[None, None, :]
    return to_r, to_phi


def _moments(basis: Basis, state, bank: NoiseBank, f_paths, p: int):
    """Regression moments of the basis against itself, the noise and the forcing.

    ``Gam`` projects the next basis values on the current ones.  The
    martingale part of the next values is then regressed on ``dNt_q phi``
    (normal equations pooled over a time window, since jumps are rare within
    one step) and what remains on ``dW_i phi`` step by step.  This yields the
    ``k`` and ``z`` coefficient maps ``Pi`` and ``Xi``; fitting the channels
    against each other removes their cross-noise.
    """
    grid = bank.grid
    M, N, d = bank.num_paths, grid.num_steps, bank.d
    P = bank.marks.num_atoms
    n = f_paths.shape[-1]
    Gam = np.zeros((N, p, p))
    Xi = np.zeros((N, d, p, p))
    Pi = np.zeros((N, P, p, p))
    Fc = np.zeros((N, n, p))
    step = int(max(1, min(CHUNK, 4_000_000 // max(1, M * (d + P + 1) * p))))

    def blocks():
        for k0 in range(0, N, step):
            k1 = min(k0 + step, N)
            L = k1 - k0
            cur_t = basis.evaluate_t(state, k0, k1)               # (L, M, p)
            if cur_t.shape[1] != M:
                cur_t = np.ascontiguousarray(np.broadcast_to(cur_t, (L, M, p)))
            nxt = basis.evaluate_t(state, k0 + 1, k1 + 1)
            if nxt.shape[1] != M:
                nxt = np.broadcast_to(nxt, (L, M, p))
            yield k0, k1, cur_t, nxt

    if P:
        # fixed standardised coordinates r = [1, (s - mu) / sigma] in which
        # jump coefficients vary slowly, so normal equations can be pooled
        to_r, to_phi = _fixed_coordinates(basis, state, p)
        qj = P * p
        XtX = np.zeros((N, qj, qj))
        XtY = np.zeros((N, qj, p))
    for k0, k1, cur_t, nxt in blocks():
        gam = np.swapaxes(nxt, 1, 2) @ cur_t / M                 # (L, p, p)
        Gam[k0:k1] = gam
        ft = np.ascontiguousarray(f_paths[:, k0:k1].transpose(1, 2, 0))  # (L, n, M)
        Fc[k0:k1] = ft @ cur_t / M
        if P:
            reg = cur_t @ np.swapaxes(to_r[k0:k1], 1, 2)           # r_k
            tgt = nxt @ np.swapaxes(to_r[k0 + 1:k1 + 1], 1, 2)     # r_{k+1}
            innov = tgt - cur_t @ (np.swapaxes(cur_t, 1, 2) @ tgt / M)
            X = _products(bank.dNt[:, k0:k1].transpose(1, 0, 2), reg)
            XtX[k0:k1] = np.swapaxes(X, 1, 2) @ X
            XtY[k0:k1] = np.swapaxes(X, 1, 2) @ innov
    if P:
        width = _pool_window(bank, p)
        coef = _ridge_solve(_moving_sum(XtX, width), _moving_sum(XtY, width))
        C = np.swapaxes(coef.reshape(N, P, p, p), 2, 3)          # r-innovation per dNt_q r_k
        # back to the whitened basis: phi_{k+1} = to_phi_{k+1} r_{k+1}, r_k = to_r_k phi_k
        Pi[:] = to_phi[1:N + 1, None] @ C @ to_r[:N, None]
    if not d:
        return Gam, Xi, Pi, Fc
    for k0, k1, cur_t, nxt in blocks():
        innov = nxt - cur_t @ np.swapaxes(Gam[k0:k1], 1, 2)
        if P:
            # remove the fitted jump part before the Brownian fit
            Xn = _products(bank.dNt[:, k0:k1].transpose(1, 0, 2), cur_t)
            innov = innov - Xn @ np.swapaxes(Pi[k0:k1], 2, 3).reshape(k1 - k0, P * p, p)
        X = _products(bank.dW[:, k0:k1].transpose(1, 0, 2), cur_t)
        coef = _ridge_solve(np.swapaxes(X, 1, 2) @ X, np.swapaxes(X, 1, 2) @ innov)
        Xi[k0:k1] = np.swapaxes(coef.reshape(k1 - k0, d, p, p), 2, 3)
    return Gam, Xi, Pi, Fc


def _evaluate(coef: np.ndarray, basis: Basis, state, M: int, grid: TimeGrid) -> np.ndarray:
    """Evaluate coefficient tracks ``(G, ..., p)`` on paths, giving ``(M, G, ...)``."""
    G = coef.shape[0]
    trail = coef.shape[1:-1]
    width = int(np.prod(trail)) if trail else 1
    flat = coef.reshape(G, width, coef.shape[-1])
    out = np.empty((M, G) + trail)
    view = out.reshape(M, G, width)
    for k0 in range(0, G, CHUNK):
        k1 = min(k0 + CHUNK, G)
        phi = basis.evaluate_t(state, k0, k1)                     # (L, 1 or M, p)
        vals = phi @ flat[k0:k1].transpose(0, 2, 1)               # (L, 1 or M, width)
        view[:, k0:k1] = vals.transpose(1, 0, 2)
    return out


def solve_linear_bsde(bank: NoiseBank, P1, P2, G1, G2, H1, H2, f=None, f_mean=None,
                      terminal=None, state=None, basis: Basis | None = None) -> AdjointSolution:
    """Solve a linear mean-field BSDE with jumps on ``bank.grid``.

    The equation is ``dy = -g ds + z dW + sum_p k_p dNt_p`` with driver

    ``g = P1 y1 + P2 y2 + sum_i (G1_i z1_i + G2_i z2_i)
    + sum_p w_p (H1_p k1_p + H2_p k2_p) + f``

    where ``1``/``2`` denote fluctuation and mean parts.

    Parameters
    ----------
    bank : NoiseBank
    P1, P2 : (G, n, n)
    G1, G2 : (G, d, n, n)
    H1, H2 : (G, P, n, n)
    f : None, (G, n) or (M, G, n)
        Driver forcing, evaluated at the left end of each step.
    f_mean : (G, n), optional
        Exact mean of ``f`` (replaces the empirical mean in the mean column).
    terminal : None, (n,) or (M, n)
        Terminal value at the horizon (projected on the basis).
    state : (M, G, q), optional
        Adapted process spanning the regression basis.
    basis : Basis, optional
        Basis already built (and cached) from ``state``; built here if omitted.

    The coefficient tracks ``(beta, Zc, Kc)`` are returned in ``coef``.
    """
    grid = bank.grid
    M, N, G = bank.num_paths, grid.num_steps, grid.size
    n = P1.shape[-1]
    dt = grid.dt
    if basis is None:
        basis = build_basis(state, grid)
        basis.cache(state)
    p = basis.size
    f_paths = paths_view(f, M, G, (n,))
    Gam, Xi, Pi, Fc = _moments(basis, state, bank, f_paths, p)
    if f_mean is not None:
        Fc[:, :, 0] = np.asarray(f_mean, dtype=float)[:N]
    eye = np.eye(n)
    with np.errstate(all="ignore"):
        inv1 = np.linalg.inv(eye - dt * P1[:N])
        inv2 = np.linalg.inv(eye - dt * P2[:N])
    if not (np.all(np.isfinite(inv1)) and np.all(np.isfinite(inv2))):
        raise NumericalError("implicit backward step is singular; reduce dt")
    w = bank.marks.atom_weight
    H1w = H1[:N] * w[None, :, None, None]
    H2w = H2[:N] * w[None, :, None, None]
    beta_T = np.zeros((n, p))
    if terminal is not None:
        term = np.asarray(terminal, dtype=float)
        if term.ndim == 1:
            beta_T[:, 0] = term
        else:
            phiT = basis.evaluate(state, N, N + 1)[:, 0]
            beta_T = term.T @ phiT / M
    beta, Zc, Kc = kernels.backward_coeffs(beta_T, Gam, Xi, Pi, Fc, inv1, inv2,
                                           G1[:N], G2[:N], H1w, H2w, dt)
    if not np.all(np.isfinite(beta)):
        raise NumericalError("non-finite backward coefficients")
    # z and k are defined on [t0, T); the last point repeats the previous value
    Zc = np.concatenate([Zc, Zc[-1:]], axis=0) if N else Zc
    Kc = np.concatenate([Kc, Kc[-1:]], axis=0) if N else Kc
    sol = adjoint_from_coefficients(beta, Zc, Kc, basis, state, M, grid)
    sol.info.update(basis_size=p, fallback_steps=basis.fallback_steps, dropped=basis.dropped,
                    sweeps=1)
    return sol


def adjoint_from_coefficients(beta: np.ndarray, Zc: np.ndarray, Kc: np.ndarray, basis: Basis,
                              state, M: int, grid: TimeGrid) -> AdjointSolution:
    """Paths ``y = beta phi``, ``z = Zc phi``, ``k = Kc phi`` on the grid.

    Column 0 of each coefficient track multiplies the constant basis
    function and is the mean part.
    """
    y = _evaluate(beta, basis, state, M, grid)
    z = _evaluate(Zc, basis, state, M, grid)
    k = _evaluate(Kc, basis, state, M, grid)
    return AdjointSolution(y, z, k, beta[:, :, 0].copy(), Zc[..., 0].copy(), Kc[..., 0].copy(),
                           grid, 0.0, beta, None, {}, (beta, Zc, Kc))


def adjoint_coefficients(spec: ProblemSpec, K: float):
    """Driver matrices of the adjoint equation with weight ``K``.

    Returns ``(A_K, P1, P2, G1, G2, H1, H2)`` with ``P^iota = (A^iota + 2K I)^T``,
    ``G^iota = C^iota^T`` and ``H^iota = M^iota^T``.
    """
    c = spec.coeffs
    eye = np.eye(spec.n)
    A_K = c.A + 2.0 * K * eye
    P1 = np.swapaxes(A_K, -1, -2)
    P2 = np.swapaxes(A_K + c.Abar, -1, -2)
    G1 = np.swapaxes(c.C, -1, -2)
    G2 = np.swapaxes(c.C + c.Cbar, -1, -2)
    H1 = np.swapaxes(c.M, -1, -2)
    H2 = np.swapaxes(c.M + c.Mbar, -1, -2)
    return A_K, P1, P2, G1, G2, H1, H2


def solve_mfbsde(spec: ProblemSpec, f, K: float, bank: NoiseBank, terminal=None, state=None,
                 f_mean=None, K1: float | None = None, check_window: bool = True) -> AdjointSolution:
    """Solve the weighted adjoint-type MF-BSDE with jumps.

    ``dy = -[A_K^T y + Abar^T E y + C^T z + Cbar^T E z + sum_p w_p (M_p^T k_p
    + Mbar_p^T E k_p) + f] ds + z dW + k dNt`` with ``A_K = A + 2K I``.

    Parameters
    ----------
    spec : ProblemSpec
    f : driver forcing, ``None``, ``(G, n)`` or ``(M, G, n)``
    K : float
        Weight exponent; must satisfy ``K < kappa``.
    bank : NoiseBank
    terminal : terminal value at the horizon (default 0)
    state : adapted ``(M, G, q)`` process spanning the regression basis
    f_mean : exact mean track of ``f``
    K1 : float, optional
        Weight exponent of ``f``; requires ``K <= K1`` when given.
    """
    from .spectral import compute_kappas

    if check_window:
        _, _, kappa = compute_kappas(spec)
        if not K < kappa:
            raise PreconditionError(f"K={K:.6g} >= kappa={kappa:.6g}: backward solvability window "
                                    f"(K < kappa) violated")
        if K1 is not None and K > K1:
            raise PreconditionError(f"K={K:.6g} > K1={K1:.6g}: driver weight window (K <= K1) violated")
    A_K, P1, P2, G1, G2, H1, H2 = adjoint_coefficients(spec, K)
    sol = solve_linear_bsde(bank, P1, P2, G1, G2, H1, H2, f=f, f_mean=f_mean,
                            terminal=terminal, state=state)
    sol.K = float(K)
    sol.A_K = A_K
    return sol


def noise_state(bank: NoiseBank) -> np.ndarray:
    """Brownian and compensated jump paths stacked as a regression state."""
    parts = [bank.brownian_paths()]
    if bank.marks.num_atoms:
        parts.append(bank.compensated_paths())
    return np.concatenate(parts, axis=2)


def check_bsde_estimate(spec: ProblemSpec, solution: AdjointSolution, f, K: float,
                        eps: float | None = None) -> EstimateReport:
    """Check the a priori estimate of the MF-BSDE.

    ``LHS = E|y(t0) e^{K t0}|^2 + (2 kappa - 2K - eps) |y|^2 + |z|^2 + |k|_rho^2``
    and ``RHS = (L2 + L3 + 1/eps) |f|^2`` in the weighted norm, with
    ``L2 = (1 + sup(|C^2|^2 + |M^2|_rho^2)/eps)/eps`` and
    ``L3 = 2 sup(1 + 2|C^1|^2 + 2|M^1|_rho^2) / (eps (2 kappa - 2K - eps)) + 2``.
    ``kappa = min(kappa1, kappa2)`` is used throughout and ``eps`` must lie
    in ``(0, 2 kappa - 2K)``; the default is the midpoint.
    """
    from .spectral import admissible_windows

    rep = admissible_windows(spec)
    kappa = rep.kappa
    hi = 2.0 * kappa - 2.0 * K
    if hi <= 0:
        raise PreconditionError(f"K={K:.6g} >= kappa={kappa:.6g}: backward estimate window violated")
    eps = 0.5 * hi if eps is None else float(eps)
    if not 0.0 < eps < hi:
        raise PreconditionError(f"eps={eps:.6g} outside (0, 2 kappa - 2K) = (0, {hi:.6g})")
    const = rep.constants(K, eps)
    grid = solution.grid
    M = solution.num_paths
    wts = grid.trapezoid_weights * np.exp(2.0 * K * grid.points)
    y, z, k = solution.y, solution.z, solution.k
    lhs_m = np.exp(2.0 * K * grid.t0) * np.einsum("mi,mi->m", y[:, 0], y[:, 0])
    sq = (hi - eps) * np.einsum("mki,mki->mk", y, y)
    sq = sq + np.einsum("mkij,mkij->mk", z, z)
    if k.shape[2]:
        sq = sq + spec.marks.fibre_norm_sq(k)
    lhs_m = lhs_m + sq @ wts
    fp = paths_view(f, M, grid.size, (spec.n,))
    factor = const["L2"] + const["L3"] + 1.0 / eps
    rhs_m = factor * (np.einsum("mki,mki->mk", fp, fp) @ wts)
    _, se, ok = mc_verdict(lhs_m - rhs_m, float(np.mean(np.abs(rhs_m))))
    return EstimateReport(float(empirical_mean(lhs_m)), float(empirical_mean(rhs_m)), se, eps, K, ok,
                          {"L2": const["L2"], "L3": const["L3"], "kappa": kappa})


def check_bsde_decay(solution: AdjointSolution, K: float, tol: float = 1e-6):
    """Decay of ``E|y(s) e^{Ks}|^2`` (see :func:`mflq.forward.check_decay`)."""
    return decay_profile(solution.y, solution.grid, K, tol)


def bsde_residual(solution: AdjointSolution, bank: NoiseBank, P1, P2, G1, G2, H1, H2,
                  f=None, f_mean=None, K: float = 0.0) -> float:
    """Cumulative local residual of the backward Euler identity.

    Re-evaluates ``y_k - y_{k+1} - g_k dt + z_k dW_k + k_k dNt_k`` path by
    path, accumulates it backward from the horizon, and returns its weighted
    norm divided by the weighted norm of ``y`` (or 1 if ``y`` vanishes).
    """
    grid = bank.grid
    M, N = bank.num_paths, grid.num_steps
    n = solution.y.shape[-1]
    y, z, k = solution.y, solution.z, solution.k
    ym, zm, km = solution.y_mean, solution.z_mean, solution.k_mean
    y1, z1, k1 = y - ym, z - zm, k - km
    fp = paths_view(f, M, grid.size, (n,))
    w = bank.marks.atom_weight
    g = (np.einsum("kab,mkb->mka", P1, y1) + np.einsum("kab,kb->ka", P2, ym)
         + np.einsum("kiab,mkib->mka", G1, z1) + np.einsum("kiab,kib->ka", G2, zm)
         + np.einsum("kpab,mkpb,p->mka", H1, k1, w) + np.einsum("kpab,kpb,p->ka", H2, km, w) + fp)
    if f_mean is not None:
        g = g - mean_of(f, grid.size, (n,)) + np.asarray(f_mean)
    local = (y[:, :N] - y[:, 1:] - g[:, :N] * grid.dt
             + np.einsum("mkia,mki->mka", z[:, :N], bank.dW)
             + np.einsum("mkpa,mkp->mka", k[:, :N], bank.dNt))
    cum = np.zeros_like(y)
    cum[:, :N] = np.cumsum(local[:, ::-1], axis=1)[:, ::-1]
    num = weighted_norm(cum, K, grid)
    den = weighted_norm(y, K, grid)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


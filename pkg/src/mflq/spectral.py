"""Dissipation constants, the positivity condition on the cost, and the
admissible windows for the weight exponent ``K``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import CostSet, ProblemSpec

DELTA_PD = 1e-9
PSD_TOL = 1e-10


def _lam_max(S: np.ndarray) -> np.ndarray:
    """Largest eigenvalue of each symmetric matrix in a ``(G, n, n)`` stack."""
    vals = np.linalg.eigvalsh(0.5 * (S + np.swapaxes(S, -1, -2)))
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite eigenvalue in dissipation computation")
    return vals[..., -1]


def _lam_min(S: np.ndarray) -> np.ndarray:
    vals = np.linalg.eigvalsh(0.5 * (S + np.swapaxes(S, -1, -2)))
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite eigenvalue in positivity check")
    return vals[..., 0]


def diffusion_gram(C: np.ndarray) -> np.ndarray:
    """``sum_i C_i^T C_i`` for a ``(G, d, n, k)`` stack."""
    return np.einsum("gian,giam->gnm", C, C)


def jump_gram(Mj: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_p w_p M_p^T M_p`` for a ``(G, P, n, k)`` stack."""
    return np.einsum("gpan,gpam,p->gnm", Mj, Mj, weights)


def op_norm_sq(C: np.ndarray) -> np.ndarray:
    """Squared operator norm of the stacked matrix ``[C_1; ...; C_d]`` per grid point."""
    if C.shape[1] == 0:
        return np.zeros(C.shape[0])
    return np.maximum(_lam_max(diffusion_gram(C)), 0.0)


def rho_norm_sq(Mj: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_p w_p |M_p|^2`` (operator norms) per grid point."""
    if Mj.shape[1] == 0:
        return np.zeros(Mj.shape[0])
    per_atom = np.maximum(_lam_max(np.einsum("gpan,gpam->gpnm", Mj, Mj)), 0.0)
    return per_atom @ weights


def kappas_from(A1, A2, C1, M1, weights) -> tuple[float, float, float]:
    """Dissipation constants from combined coefficient tracks."""
    k1 = -0.5 * float(np.max(_lam_max(A2 + np.swapaxes(A2, -1, -2))))
    S2 = A1 + np.swapaxes(A1, -1, -2) + diffusion_gram(C1) + jump_gram(M1, weights)
    k2 = -0.5 * float(np.max(_lam_max(S2)))
    return k1, k2, min(k1, k2)


def compute_kappas(spec: ProblemSpec) -> tuple[float, float, float]:
    """Return ``(kappa1, kappa2, kappa)``.

    ``kappa1 = -1/2 sup lam_max(A^2 + A^2^T)`` governs the mean dynamics and
    ``kappa2 = -1/2 sup lam_max(A^1 + A^1^T + sum_i C_i^T C_i + sum_p w_p M_p^T M_p)``
    the fluctuations; ``kappa = min(kappa1, kappa2)``.
    """
    c = spec.coeffs
    return kappas_from(c.A, c.A + c.Abar, c.C, c.M, spec.marks.atom_weight)


def compute_kappas_transformed(spec: ProblemSpec) -> tuple[float, float, float]:
    """Dissipation constants of the cross-term-free problem."""
    from .hamiltonian import eliminate_cross_terms

    ts = eliminate_cross_terms(spec)
    return compute_kappas(ts.spec)


def sup_norms(spec: ProblemSpec) -> dict:
    """Norm tracks and suprema entering the estimate constants."""
    c, w = spec.coeffs, spec.marks.atom_weight
    C1 = op_norm_sq(c.C)
    C2 = op_norm_sq(c.C + c.Cbar)
    M1 = rho_norm_sq(c.M, w)
    M2 = rho_norm_sq(c.M + c.Mbar, w)
    return {
        "C1_sq": C1, "M1_sq": M1, "C2_sq": C2, "M2_sq": M2,
        "sup_C1_M1": float(np.max(C1 + M1)), "sup_C2_M2": float(np.max(C2 + M2)),
        "sup_C1": float(np.max(C1)), "sup_M1": float(np.max(M1)),
    }


# ---------------------------------------------------------------------------
# Positivity of the cost
# ---------------------------------------------------------------------------

@dataclass
class PDVerdict:
    """Outcome of the positivity check on the cost.

    ``block_ok`` uses the 2x2 block matrix, ``schur_ok`` the Schur complement
    ``Q - S^T R^{-1} S``; both require ``lam_min(R) >= delta``.
    """

    ok: bool
    block_ok: bool
    schur_ok: bool
    delta: float
    r_margin: tuple[float, float]
    block_margin: tuple[float, float]
    schur_margin: tuple[float, float]
    failures: list = field(default_factory=list)

    @property
    def agree(self) -> bool:
        return self.block_ok == self.schur_ok

    def to_dict(self) -> dict:
        return {"ok": self.ok, "block_ok": self.block_ok, "schur_ok": self.schur_ok,
                "delta": self.delta, "r_margin": list(self.r_margin),
                "block_margin": list(self.block_margin), "schur_margin": list(self.schur_margin),
                "failures": self.failures}


def _psd_tol(X: np.ndarray) -> float:
    return PSD_TOL * max(1.0, float(np.max(np.abs(X), initial=0.0)))


def check_pd(cost: CostSet, delta: float = DELTA_PD) -> PDVerdict:
    """Check ``R^iota >> 0`` and positive semidefiniteness of the cost blocks.

    For ``iota = 1, 2`` and every grid point, tests ``lam_min(R^iota) >= delta``
    together with (a) the block matrix ``[[Q, S^T], [S, R]] >= 0`` and (b) the
    Schur complement ``Q - S^T R^{-1} S >= 0``.  Margins are minimal
    eigenvalues over the grid.
    """
    r_m, b_m, s_m, fails = [], [], [], []
    block_ok = schur_ok = True
    for iota in (1, 2):
        Q, S, R = (cost.combined(k, iota) for k in ("Q", "S", "R"))
        rmin = _lam_min(R)
        r_ok = bool(np.all(rmin >= delta))
        block = np.concatenate([np.concatenate([Q, np.swapaxes(S, -1, -2)], axis=-1),
                                np.concatenate([S, R], axis=-1)], axis=-2)
        bmin = _lam_min(block)
        tol_b = _psd_tol(block)
        if r_ok:
            schur = Q - np.swapaxes(S, -1, -2) @ np.linalg.solve(R, S)
            smin = _lam_min(schur)
            tol_s = _psd_tol(schur) + _psd_tol(Q)
            s_ok = bool(np.all(smin >= -tol_s))
            s_margin = float(np.min(smin))
        else:
            s_ok, s_margin = False, float("nan")
        b_ok = r_ok and bool(np.all(bmin >= -tol_b))
        if not r_ok:
            k = int(np.argmin(rmin))
            fails.append(f"R^{iota} not uniformly positive at grid point {k}: "
                         f"lam_min={rmin[k]:.3e} < delta={delta:.1e}")
        if r_ok and not b_ok:
            fails.append(f"cost block {iota} not positive semidefinite (lam_min={np.min(bmin):.3e})")
        if r_ok and not s_ok:
            fails.append(f"Schur complement {iota} not positive semidefinite (lam_min={s_margin:.3e})")
        block_ok &= b_ok
        schur_ok &= s_ok
        r_m.append(float(np.min(rmin)))
        b_m.append(float(np.min(bmin)))
        s_m.append(s_margin)
    return PDVerdict(block_ok and schur_ok, block_ok, schur_ok, delta,
                     tuple(r_m), tuple(b_m), tuple(s_m), fails)


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------

@dataclass
class DissipationReport:
    """Dissipation constants, positivity verdict and admissible ``K`` windows.

    Windows are half-open intervals ``(lo, hi)``; ``-inf`` marks an open
    lower end.  The continuation window is ``[start, start + k_hat)`` with
    ``start = (kappa1 - kappa2)/2`` of the problem actually solved (the
    cross-term-free one when the cost has cross terms).
    """

    kappa1: float
    kappa2: float
    kappa: float
    kappa1_t: float | None
    kappa2_t: float | None
    kappa_t: float | None
    pd: PDVerdict
    has_cross_terms: bool
    k_hat: float = 0.0
    norms: dict = field(default_factory=dict, repr=False)
    R_inverse_bounds: dict = field(default_factory=dict, repr=False)

    @property
    def sde_window(self) -> tuple[float, float]:
        return (-np.inf, self.kappa)

    @property
    def bsde_window(self) -> tuple[float, float]:
        return (-np.inf, self.kappa)

    @property
    def base_case_ok(self) -> bool:
        return self.kappa1 > -self.kappa2

    @property
    def base_case_ok_t(self) -> bool:
        return self.kappa1_t is not None and self.kappa1_t > -self.kappa2_t

    @property
    def hamiltonian_window(self) -> tuple[float, float]:
        """Guaranteed continuation window of the untransformed problem."""
        start = 0.5 * (self.kappa1 - self.kappa2)
        return (start, start + self.k_hat)

    @property
    def hamiltonian_window_t(self) -> tuple[float, float] | None:
        if self.kappa1_t is None:
            return None
        start = 0.5 * (self.kappa1_t - self.kappa2_t)
        return (start, start + self.k_hat)

    @property
    def guarantee_note(self) -> str:
        if self.has_cross_terms:
            return "not guaranteed (S != 0): solve the cross-term-free transformed problem"
        return "guaranteed for the cross-term-free problem"

    def epsilon_defaults(self, K: float) -> dict:
        """Mid-window epsilons for the forward and backward estimates."""
        out = {}
        if K < self.kappa:
            out["forward"] = (2.0 * self.kappa - 2.0 * K) / 6.0
            out["backward"] = (2.0 * self.kappa - 2.0 * K) / 2.0
        return out

    def constants(self, K: float, eps: float) -> dict:
        """The estimate constants ``L_{eps,1..4}`` and ``L_{R,R~}`` at ``(K, eps)``."""
        nm = self.norms
        L1 = 1.0 + 2.0 * nm["sup_C2_M2"] / (-2.0 * K + 2.0 * self.kappa1 - eps)
        L2 = (1.0 / eps) * (1.0 + nm["sup_C2_M2"] / eps)
        L3 = 2.0 * (1.0 + 2.0 * nm["sup_C1_M1"]) / (eps * (2.0 * self.kappa - 2.0 * K - eps)) + 2.0
        rb = self.R_inverse_bounds
        out = {"L1": L1, "L2": L2, "L3": L3}
        if rb:
            L4 = 3.0 * max(L1 / eps * rb["BR"][i] + (2.0 + nm["sup_C1"] / eps) * rb["DR"][i]
                           + (2.0 + nm["sup_M1"] / eps) * rb["NR"][i] for i in (0, 1))
            out["L4"] = L4
            out["LRR"] = rb["LRR"]
        return out

    def to_dict(self) -> dict:
        hw_t = self.hamiltonian_window_t
        return {
            "kappa1": self.kappa1, "kappa2": self.kappa2, "kappa": self.kappa,
            "kappa1_t": self.kappa1_t, "kappa2_t": self.kappa2_t, "kappa_t": self.kappa_t,
            "pd": self.pd.to_dict(), "has_cross_terms": self.has_cross_terms,
            "sde_window": [None, self.kappa], "bsde_window": [None, self.kappa],
            "base_case_ok": self.base_case_ok, "base_case_ok_t": self.base_case_ok_t,
            "hamiltonian_window": list(self.hamiltonian_window),
            "hamiltonian_window_t": None if hw_t is None else list(hw_t),
            "k_hat": self.k_hat, "guarantee": self.guarantee_note,
            "backward_estimate_variant": "kappa = min(kappa1, kappa2) used in prefactor, "
                                         "epsilon window and L3",
        }

    def text(self) -> str:
        hw = self.hamiltonian_window
        lines = [
            f"kappa1   = {self.kappa1:.12g}",
            f"kappa2   = {self.kappa2:.12g}",
            f"kappa    = {self.kappa:.12g}",
        ]
        if self.kappa_t is not None:
            lines += [f"kappa1_t = {self.kappa1_t:.12g}",
                      f"kappa2_t = {self.kappa2_t:.12g}",
                      f"kappa_t  = {self.kappa_t:.12g}"]
        lines += [
            f"condition PD: {'pass' if self.pd.ok else 'FAIL'} "
            f"(R margins {self.pd.r_margin[0]:.3g}, {self.pd.r_margin[1]:.3g}; "
            f"Schur margins {self.pd.schur_margin[0]:.3g}, {self.pd.schur_margin[1]:.3g})",
            f"forward/backward window: K < {self.kappa:.6g}",
            f"base case kappa1 > -kappa2: {self.base_case_ok}",
            f"continuation window (untransformed): [{hw[0]:.6g}, {hw[1]:.6g}) "
            f"{'not guaranteed (S != 0)' if self.has_cross_terms else ''}".rstrip(),
        ]
        hw_t = self.hamiltonian_window_t
        if hw_t is not None and self.has_cross_terms:
            lines.append(f"continuation window (transformed): [{hw_t[0]:.6g}, {hw_t[1]:.6g}), "
                         f"base case {self.base_case_ok_t}")
        lines.extend(f"  {f}" for f in self.pd.failures)
        return "\n".join(lines)


def _r_inverse_bounds(spec: ProblemSpec) -> dict:
    c, cost, w = spec.coeffs, spec.cost, spec.marks.atom_weight
    out = {"BR": [], "DR": [], "NR": [], "lam_min_Rinv": []}
    for iota in (1, 2):
        R = cost.combined("R", iota)
        Rinv = np.linalg.inv(R)
        BR = c.combined("B", iota) @ Rinv
        DR = np.einsum("giab,gbc->giac", c.combined("D", iota), Rinv)
        NR = np.einsum("gpab,gbc->gpac", c.combined("N", iota), Rinv)
        out["BR"].append(float(np.max(_lam_max(np.swapaxes(BR, -1, -2) @ BR))))
        out["DR"].append(float(np.max(op_norm_sq(DR))))
        out["NR"].append(float(np.max(rho_norm_sq(NR, w))))
        out["lam_min_Rinv"].append(float(np.min(_lam_min(Rinv))))
    out["LRR"] = 1.0 / min(out["lam_min_Rinv"])
    return out


def admissible_windows(spec: ProblemSpec, k_hat: float = 0.0, delta: float = DELTA_PD) -> DissipationReport:
    """Assemble the dissipation report for a problem.

    ``k_hat`` is the empirically estimated contraction margin (0 until the
    continuation solver has measured one).
    """
    k1, k2, k = compute_kappas(spec)
    pd = check_pd(spec.cost, delta)
    cross = spec.cost.has_cross_terms()
    k1t = k2t = kt = None
    bounds = {}
    if pd.r_margin[0] >= delta and pd.r_margin[1] >= delta:
        k1t, k2t, kt = compute_kappas_transformed(spec)
        bounds = _r_inverse_bounds(spec)
    return DissipationReport(k1, k2, k, k1t, k2t, kt, pd, cross, float(k_hat),
                             sup_norms(spec), bounds)

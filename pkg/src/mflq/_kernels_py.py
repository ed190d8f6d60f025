"""Pure-numpy reference implementations of the time-stepping kernels.

These mirror the compiled kernels in ``_ckernels.pyx`` argument for
argument.  Loops over time are sequential; work inside a step is
vectorized over paths.
"""

from __future__ import annotations

import numpy as np


def _step(xk, xbar_k, F, Fb, f, G, Gb, g, H, Hb, h, dW, dNt, dt):
    drift = xk @ F.T + Fb @ xbar_k + f
    out = xk + dt * drift
    if dW.shape[1]:
        diff = np.einsum("iab,mb->mia", G, xk) + np.einsum("iab,b->ia", Gb, xbar_k) + g
        out += np.einsum("mia,mi->ma", diff, dW)
    if dNt.shape[1]:
        jump = np.einsum("pab,mb->mpa", H, xk) + np.einsum("pab,b->pa", Hb, xbar_k) + h
        out += np.einsum("mpa,mp->ma", jump, dNt)
    return out


def euler_paths(x0, F, Fb, f, G, Gb, g, H, Hb, h, dW, dNt, xbar, dt):
    """Euler-Maruyama recursion with a prescribed mean track.

    Parameters
    ----------
    x0 : (M, n) initial states
    F, Fb : (N, n, n) drift matrices acting on the state and on its mean
    f : (M, N, n) drift forcing
    G, Gb : (N, d, n, n) diffusion matrices; g : (M, N, d, n) forcing
    H, Hb : (N, P, n, n) jump matrices per atom; h : (M, N, P, n) forcing
    dW : (M, N, d) Brownian increments
    dNt : (M, N, P) compensated jump counts
    xbar : (N + 1, n) mean track fed into the barred terms
    dt : float

    Returns
    -------
    x : (M, N + 1, n)
    """
    M, n = x0.shape
    N = F.shape[0]
    x = np.empty((M, N + 1, n))
    x[:, 0] = x0
    for k in range(N):
        x[:, k + 1] = _step(x[:, k], xbar[k], F[k], Fb[k], f[:, k], G[k], Gb[k], g[:, k],
                            H[k], Hb[k], h[:, k], dW[:, k], dNt[:, k], dt)
    return x


def euler_paths_empirical(x0, F, Fb, f, G, Gb, g, H, Hb, h, dW, dNt, dt):
    """Interacting-particle recursion: the mean is the path average at each step.

    Returns ``(x, xbar)`` with ``xbar`` of shape ``(N + 1, n)``.
    """
    M, n = x0.shape
    N = F.shape[0]
    x = np.empty((M, N + 1, n))
    xbar = np.empty((N + 1, n))
    x[:, 0] = x0
    for k in range(N):
        xbar[k] = np.add.reduce(x[:, k], axis=0) / M
        x[:, k + 1] = _step(x[:, k], xbar[k], F[k], Fb[k], f[:, k], G[k], Gb[k], g[:, k],
                            H[k], Hb[k], h[:, k], dW[:, k], dNt[:, k], dt)
    xbar[N] = np.add.reduce(x[:, N], axis=0) / M
    return x, xbar


def mean_ode(Fsum, fbar, x0bar, dt):
    """Euler recursion ``m_{k+1} = m_k + (Fsum_k m_k + fbar_k) dt``."""
    N, n = fbar.shape
    out = np.empty((N + 1, n))
    out[0] = x0bar
    for k in range(N):
        out[k + 1] = out[k] + dt * (Fsum[k] @ out[k] + fbar[k])
    return out


def backward_coeffs(beta_T, Gam, Xi, Pi, Fc, inv1, inv2, G1t, G2t, H1t, H2t, dt):
    """Backward recursion for regression coefficients of a linear MF-BSDE.

    The solution is represented as ``y_k = beta_k phi_k`` with basis
    ``phi_k = (1, s_k - mean(s_k))``.  Column 0 carries the mean part (driven
    by the iota=2 coefficients), the remaining columns carry the fluctuation
    part (iota=1 coefficients).

    Parameters
    ----------
    beta_T : (n, p) terminal coefficients
    Gam : (N, p, p) conditional expectation map ``E_k phi_{k+1} = Gam_k phi_k``
    Xi : (N, d, p, p) map for ``E_k[phi_{k+1} dW_i] / dt``
    Pi : (N, P, p, p) map for ``E_k[phi_{k+1} dNt_p] / (w_p dt)``
    Fc : (N, n, p) driver forcing coefficients at each step
    inv1, inv2 : (N, n, n) implicit-step inverses ``(I - dt P^iota^T)^{-1}``
    G1t, G2t : (N, d, n, n) transposed diffusion coefficients in the driver
    H1t, H2t : (N, P, n, n) transposed jump coefficients, pre-scaled by weights
    dt : float

    Returns
    -------
    beta : (N + 1, n, p), Zc : (N, d, n, p), Kc : (N, P, n, p)
    """
    n, p = beta_T.shape
    N = Gam.shape[0]
    d = Xi.shape[1]
    P = Pi.shape[1]
    beta = np.empty((N + 1, n, p))
    Zc = np.zeros((N, d, n, p))
    Kc = np.zeros((N, P, n, p))
    beta[N] = beta_T
    for k in range(N - 1, -1, -1):
        nxt = beta[k + 1]
        fl = nxt.copy()
        fl[:, 0] = 0.0
        rhs = nxt @ Gam[k] + dt * Fc[k]
        for i in range(d):
            Z = fl @ Xi[k, i]
            Zc[k, i] = Z
            rhs[:, 0] += dt * (G2t[k, i] @ Z[:, 0])
            rhs[:, 1:] += dt * (G1t[k, i] @ Z[:, 1:])
        for q in range(P):
            Kq = fl @ Pi[k, q]
            Kc[k, q] = Kq
            rhs[:, 0] += dt * (H2t[k, q] @ Kq[:, 0])
            rhs[:, 1:] += dt * (H1t[k, q] @ Kq[:, 1:])
        beta[k, :, 0] = inv2[k] @ rhs[:, 0]
        beta[k, :, 1:] = inv1[k] @ rhs[:, 1:]
    return beta, Zc, Kc

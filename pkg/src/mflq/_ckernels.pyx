# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled time-stepping kernels.

Signatures and semantics match ``_kernels_py``.  All loops run without the
GIL; reductions over paths are performed in path-index order.
"""

import numpy as np


cdef inline void _advance(const double[:, ::1] xk_in, double[:, ::1] xk_out,
                          const double[::1] xbar_k,
                          const double[:, :, ::1] F, const double[:, :, ::1] Fb,
                          const double[:, :, :] f,
                          const double[:, :, :, ::1] G, const double[:, :, :, ::1] Gb,
                          const double[:, :, :, :] g,
                          const double[:, :, :, ::1] H, const double[:, :, :, ::1] Hb,
                          const double[:, :, :, :] h,
                          const double[:, :, :] dW, const double[:, :, :] dNt,
                          double[::1] fbx, double[:, ::1] gbx, double[:, ::1] hbx,
                          Py_ssize_t k, double dt) noexcept nogil:
    cdef Py_ssize_t M = xk_in.shape[0]
    cdef Py_ssize_t n = xk_in.shape[1]
    cdef Py_ssize_t d = G.shape[1]
    cdef Py_ssize_t P = H.shape[1]
    cdef Py_ssize_t m, a, b, i, q
    cdef double acc, lin, w
    # mean-dependent parts are shared by every path
    for a in range(n):
        acc = 0.0
        for b in range(n):
            acc = acc + Fb[k, a, b] * xbar_k[b]
        fbx[a] = acc
        for i in range(d):
            acc = 0.0
            for b in range(n):
                acc = acc + Gb[k, i, a, b] * xbar_k[b]
            gbx[i, a] = acc
        for q in range(P):
            acc = 0.0
            for b in range(n):
                acc = acc + Hb[k, q, a, b] * xbar_k[b]
            hbx[q, a] = acc
    for m in range(M):
        for a in range(n):
            lin = 0.0
            for b in range(n):
                lin = lin + F[k, a, b] * xk_in[m, b]
            acc = xk_in[m, a] + dt * (lin + fbx[a] + f[m, k, a])
            for i in range(d):
                w = dW[m, k, i]
                if w != 0.0:
                    lin = 0.0
                    for b in range(n):
                        lin = lin + G[k, i, a, b] * xk_in[m, b]
                    acc = acc + w * (lin + gbx[i, a] + g[m, k, i, a])
            for q in range(P):
                w = dNt[m, k, q]
                lin = 0.0
                for b in range(n):
                    lin = lin + H[k, q, a, b] * xk_in[m, b]
                acc = acc + w * (lin + hbx[q, a] + h[m, k, q, a])
            xk_out[m, a] = acc


def _scratch(x0, Py_ssize_t M, Py_ssize_t n, Py_ssize_t d, Py_ssize_t P):
    return (np.array(x0, dtype=np.float64, order="C", copy=True), np.empty((M, n)),
            np.empty(n), np.empty((d, n)),
            np.empty((P, n)))


def euler_paths(x0, F, Fb, f, G, Gb, g, H, Hb, h, dW, dNt, xbar, double dt):
    cdef const double[:, :, ::1] F_ = np.ascontiguousarray(F, dtype=np.float64)
    cdef const double[:, :, ::1] Fb_ = np.ascontiguousarray(Fb, dtype=np.float64)
    cdef const double[:, :, :] f_ = f
    cdef const double[:, :, :, ::1] G_ = np.ascontiguousarray(G, dtype=np.float64)
    cdef const double[:, :, :, ::1] Gb_ = np.ascontiguousarray(Gb, dtype=np.float64)
    cdef const double[:, :, :, :] g_ = g
    cdef const double[:, :, :, ::1] H_ = np.ascontiguousarray(H, dtype=np.float64)
    cdef const double[:, :, :, ::1] Hb_ = np.ascontiguousarray(Hb, dtype=np.float64)
    cdef const double[:, :, :, :] h_ = h
    cdef const double[:, :, :] dW_ = dW
    cdef const double[:, :, :] dNt_ = dNt
    cdef const double[:, ::1] xbar_ = np.ascontiguousarray(xbar, dtype=np.float64)
    cdef Py_ssize_t M = x0.shape[0]
    cdef Py_ssize_t n = x0.shape[1]
    cdef Py_ssize_t N = F_.shape[0]
    cdef Py_ssize_t k, m, a
    out = np.empty((M, N + 1, n))
    cdef double[:, :, ::1] x = out
    cur_arr, nxt_arr, fbx_arr, gbx_arr, hbx_arr = _scratch(x0, M, n, G_.shape[1], H_.shape[1])
    cdef double[:, ::1] cur = cur_arr
    cdef double[:, ::1] nxt = nxt_arr
    cdef double[::1] fbx = fbx_arr
    cdef double[:, ::1] gbx = gbx_arr
    cdef double[:, ::1] hbx = hbx_arr
    with nogil:
        for m in range(M):
            for a in range(n):
                x[m, 0, a] = cur[m, a]
        for k in range(N):
            _advance(cur, nxt, xbar_[k], F_, Fb_, f_, G_, Gb_, g_, H_, Hb_, h_, dW_, dNt_,
                     fbx, gbx, hbx, k, dt)
            for m in range(M):
                for a in range(n):
                    cur[m, a] = nxt[m, a]
                    x[m, k + 1, a] = nxt[m, a]
    return out


def euler_paths_empirical(x0, F, Fb, f, G, Gb, g, H, Hb, h, dW, dNt, double dt):
    cdef const double[:, :, ::1] F_ = np.ascontiguousarray(F, dtype=np.float64)
    cdef const double[:, :, ::1] Fb_ = np.ascontiguousarray(Fb, dtype=np.float64)
    cdef const double[:, :, :] f_ = f
    cdef const double[:, :, :, ::1] G_ = np.ascontiguousarray(G, dtype=np.float64)
    cdef const double[:, :, :, ::1] Gb_ = np.ascontiguousarray(Gb, dtype=np.float64)
    cdef const double[:, :, :, :] g_ = g
    cdef const double[:, :, :, ::1] H_ = np.ascontiguousarray(H, dtype=np.float64)
    cdef const double[:, :, :, ::1] Hb_ = np.ascontiguousarray(Hb, dtype=np.float64)
    cdef const double[:, :, :, :] h_ = h
    cdef const double[:, :, :] dW_ = dW
    cdef const double[:, :, :] dNt_ = dNt
    cdef Py_ssize_t M = x0.shape[0]
    cdef Py_ssize_t n = x0.shape[1]
    cdef Py_ssize_t N = F_.shape[0]
    cdef Py_ssize_t k, m, a
    cdef double inv_M = 1.0 / M
    out = np.empty((M, N + 1, n))
    mean_out = np.zeros((N + 1, n))
    cdef double[:, :, ::1] x = out
    cdef double[:, ::1] xbar = mean_out
    cur_arr, nxt_arr, fbx_arr, gbx_arr, hbx_arr = _scratch(x0, M, n, G_.shape[1], H_.shape[1])
    cdef double[:, ::1] cur = cur_arr
    cdef double[:, ::1] nxt = nxt_arr
    cdef double[::1] fbx = fbx_arr
    cdef double[:, ::1] gbx = gbx_arr
    cdef double[:, ::1] hbx = hbx_arr
    with nogil:
        for m in range(M):
            for a in range(n):
                x[m, 0, a] = cur[m, a]
        for k in range(N + 1):
            for m in range(M):
                for a in range(n):
                    xbar[k, a] = xbar[k, a] + cur[m, a]
            for a in range(n):
                xbar[k, a] = xbar[k, a] * inv_M
            if k == N:
                break
            _advance(cur, nxt, xbar[k], F_, Fb_, f_, G_, Gb_, g_, H_, Hb_, h_, dW_, dNt_,
                     fbx, gbx, hbx, k, dt)
            for m in range(M):
                for a in range(n):
                    cur[m, a] = nxt[m, a]
                    x[m, k + 1, a] = nxt[m, a]
    return out, mean_out


def mean_ode(Fsum, fbar, x0bar, double dt):
    cdef const double[:, :, ::1] F_ = np.ascontiguousarray(Fsum, dtype=np.float64)
    cdef const double[:, ::1] f_ = np.ascontiguousarray(fbar, dtype=np.float64)
    cdef Py_ssize_t N = f_.shape[0]
    cdef Py_ssize_t n = f_.shape[1]
    cdef Py_ssize_t k, a, b
    cdef double acc
    res = np.empty((N + 1, n))
    res[0] = x0bar
    cdef double[:, ::1] out = res
    with nogil:
        for k in range(N):
            for a in range(n):
                acc = 0.0
                for b in range(n):
                    acc = acc + F_[k, a, b] * out[k, b]
                out[k + 1, a] = out[k, a] + dt * (acc + f_[k, a])
    return res


def backward_coeffs(beta_T, Gam, Xi, Pi, Fc, inv1, inv2, G1t, G2t, H1t, H2t, double dt):
    cdef const double[:, :, ::1] Gam_ = np.ascontiguousarray(Gam, dtype=np.float64)
    cdef const double[:, :, :, ::1] Xi_ = np.ascontiguousarray(Xi, dtype=np.float64)
    cdef const double[:, :, :, ::1] Pi_ = np.ascontiguousarray(Pi, dtype=np.float64)
    cdef const double[:, :, ::1] Fc_ = np.ascontiguousarray(Fc, dtype=np.float64)
    cdef const double[:, :, ::1] inv1_ = np.ascontiguousarray(inv1, dtype=np.float64)
    cdef const double[:, :, ::1] inv2_ = np.ascontiguousarray(inv2, dtype=np.float64)
    cdef const double[:, :, :, ::1] G1_ = np.ascontiguousarray(G1t, dtype=np.float64)
    cdef const double[:, :, :, ::1] G2_ = np.ascontiguousarray(G2t, dtype=np.float64)
    cdef const double[:, :, :, ::1] H1_ = np.ascontiguousarray(H1t, dtype=np.float64)
    cdef const double[:, :, :, ::1] H2_ = np.ascontiguousarray(H2t, dtype=np.float64)
    cdef Py_ssize_t n = beta_T.shape[0]
    cdef Py_ssize_t p = beta_T.shape[1]
    cdef Py_ssize_t N = Gam_.shape[0]
    cdef Py_ssize_t d = Xi_.shape[1]
    cdef Py_ssize_t P = Pi_.shape[1]
    beta_arr = np.empty((N + 1, n, p))
    Zc_arr = np.zeros((N, d, n, p))
    Kc_arr = np.zeros((N, P, n, p))
    rhs_arr = np.empty((n, p))
    beta_arr[N] = beta_T
    cdef double[:, :, ::1] beta = beta_arr
    cdef double[:, :, :, ::1] Zc = Zc_arr
    cdef double[:, :, :, ::1] Kc = Kc_arr
    cdef double[:, ::1] rhs = rhs_arr
    cdef Py_ssize_t k, a, b, c, i, q
    cdef double acc
    with nogil:
        for k in range(N - 1, -1, -1):
            # conditional expectation and forcing
            for a in range(n):
                for c in range(p):
                    acc = 0.0
                    for b in range(p):
                        acc = acc + beta[k + 1, a, b] * Gam_[k, b, c]
                    rhs[a, c] = acc + dt * Fc_[k, a, c]
            # z coefficients use only the fluctuation columns of beta_{k+1}
            for i in range(d):
                for a in range(n):
                    for c in range(p):
                        acc = 0.0
                        for b in range(1, p):
                            acc = acc + beta[k + 1, a, b] * Xi_[k, i, b, c]
                        Zc[k, i, a, c] = acc
                for a in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc = acc + G2_[k, i, a, b] * Zc[k, i, b, 0]
                    rhs[a, 0] = rhs[a, 0] + dt * acc
                    for c in range(1, p):
                        acc = 0.0
                        for b in range(n):
                            acc = acc + G1_[k, i, a, b] * Zc[k, i, b, c]
                        rhs[a, c] = rhs[a, c] + dt * acc
            for q in range(P):
                for a in range(n):
                    for c in range(p):
                        acc = 0.0
                        for b in range(1, p):
                            acc = acc + beta[k + 1, a, b] * Pi_[k, q, b, c]
                        Kc[k, q, a, c] = acc
                for a in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc = acc + H2_[k, q, a, b] * Kc[k, q, b, 0]
                    rhs[a, 0] = rhs[a, 0] + dt * acc
                    for c in range(1, p):
                        acc = 0.0
                        for b in range(n):
                            acc = acc + H1_[k, q, a, b] * Kc[k, q, b, c]
                        rhs[a, c] = rhs[a, c] + dt * acc
            # implicit step: mean column with iota=2, fluctuation columns with iota=1
            for a in range(n):
                acc = 0.0
                for b in range(n):
                    acc = acc + inv2_[k, a, b] * rhs[b, 0]
                beta[k, a, 0] = acc
                for c in range(1, p):
                    acc = 0.0
                    for b in range(n):
                        acc = acc + inv1_[k, a, b] * rhs[b, c]
                    beta[k, a, c] = acc
    return beta_arr, Zc_arr, Kc_arr

import numpy as np
import pytest

from mflq import _kernels_py, kernels

compiled = pytest.importorskip("mflq._ckernels")


def _inputs(seed, M=7, N=13, n=3, d=2, P=2):
    r = np.random.default_rng(seed)
    return dict(
        x0=r.standard_normal((M, n)), F=0.1 * r.standard_normal((N, n, n)),
        Fb=0.1 * r.standard_normal((N, n, n)), f=r.standard_normal((M, N, n)),
        G=0.1 * r.standard_normal((N, d, n, n)), Gb=0.1 * r.standard_normal((N, d, n, n)),
        g=r.standard_normal((M, N, d, n)), H=0.1 * r.standard_normal((N, P, n, n)),
        Hb=0.1 * r.standard_normal((N, P, n, n)), h=r.standard_normal((M, N, P, n)),
        dW=0.1 * r.standard_normal((M, N, d)), dNt=r.poisson(0.1, (M, N, P)) - 0.1,
    )


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_euler_paths_agree(seed):
    a = _inputs(seed)
    xbar = np.random.default_rng(seed).standard_normal((a["F"].shape[0] + 1, 3))
    args = list(a.values()) + [xbar, 0.01]
    np.testing.assert_allclose(compiled.euler_paths(*args), _kernels_py.euler_paths(*args),
                               rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1])
def test_euler_paths_empirical_agree(seed):
    args = list(_inputs(seed).values()) + [0.01]
    xc, mc = compiled.euler_paths_empirical(*args)
    xp, mp = _kernels_py.euler_paths_empirical(*args)
    np.testing.assert_allclose(xc, xp, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(mc, mp, rtol=1e-12, atol=1e-12)


def test_empirical_mean_is_path_average():
    args = list(_inputs(3).values()) + [0.01]
    x, m = compiled.euler_paths_empirical(*args)
    np.testing.assert_allclose(m, x.mean(axis=0), atol=1e-13)


def test_mean_ode_agree_and_exact_for_constant():
    r = np.random.default_rng(4)
    N, n = 50, 2
    Fsum = np.broadcast_to(-np.eye(n), (N, n, n)).copy()
    fbar = np.zeros((N, n))
    x0 = r.standard_normal(n)
    out = compiled.mean_ode(Fsum, fbar, x0, 0.1)
    np.testing.assert_allclose(out, _kernels_py.mean_ode(Fsum, fbar, x0, 0.1), rtol=1e-14)
    np.testing.assert_allclose(out[-1], x0 * 0.9 ** N, rtol=1e-12)


def test_backward_coeffs_agree():
    r = np.random.default_rng(5)
    N, n, p, d, P = 11, 2, 3, 2, 2
    args = dict(
        beta_T=r.standard_normal((n, p)), Gam=r.standard_normal((N, p, p)) * 0.3,
        Xi=r.standard_normal((N, d, p, p)) * 0.3, Pi=r.standard_normal((N, P, p, p)) * 0.3,
        Fc=r.standard_normal((N, n, p)), inv1=r.standard_normal((N, n, n)) * 0.3,
        inv2=r.standard_normal((N, n, n)) * 0.3, G1t=r.standard_normal((N, d, n, n)),
        G2t=r.standard_normal((N, d, n, n)), H1t=r.standard_normal((N, P, n, n)),
        H2t=r.standard_normal((N, P, n, n)), dt=0.05,
    )
    for c, py in zip(compiled.backward_coeffs(*args.values()),
                     _kernels_py.backward_coeffs(*args.values())):
        np.testing.assert_allclose(c, py, rtol=1e-11, atol=1e-12)

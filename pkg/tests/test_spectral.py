import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mflq.control import example31_spec
from mflq.model import CostSet, MarkMeasure, TimeGrid, make_spec
from mflq.spectral import (admissible_windows, check_pd, compute_kappas, compute_kappas_transformed,
                           op_norm_sq, rho_norm_sq)


@pytest.mark.parametrize("rho", [0.5, 1.0, 2.0])
def test_example_kappas(rho):
    spec = example31_spec(rho, 0.0, 1.0, TimeGrid(0.0, 1.0, 0.1))
    assert compute_kappas(spec) == pytest.approx((2 * rho, rho, rho), abs=1e-12)
    assert compute_kappas_transformed(spec) == pytest.approx((rho / 2, rho / 2, rho / 2), abs=1e-12)


def test_kappa_scalar_hand_computation():
    # scalar: kappa1 = -(A + Abar), kappa2 = -(2A + C^2 + w M^2) / 2
    mk = MarkMeasure([[[0.0]]], [[2.0]])
    spec = make_spec(1, 1, 1, TimeGrid(0.0, 1.0, 0.5), marks=mk, A=-3.0, Abar=1.0,
                     C=0.5, Cbar=0.5, M=0.5, Mbar=0.0)
    k1, k2, k = compute_kappas(spec)
    assert k1 == pytest.approx(2.0)
    assert k2 == pytest.approx(0.5 * (6.0 - 0.25 - 2.0 * 0.25))
    assert k == pytest.approx(min(k1, k2))


def test_operator_norms():
    C = np.array([[[[3.0, 0.0], [0.0, 1.0]]]])
    assert op_norm_sq(C)[0] == pytest.approx(9.0)
    Mj = np.array([[[[2.0]], [[1.0]]]])
    assert rho_norm_sq(Mj, np.array([1.0, 3.0]))[0] == pytest.approx(4.0 + 3.0)


def _cost(W1, W2, n):
    s = lambda X: X[None]  # noqa: E731
    D = W2 - W1
    return CostSet(s(W1[:n, :n]), s(D[:n, :n]), s(W1[n:, :n]), s(D[n:, :n]), s(W1[n:, n:]),
                   s(D[n:, n:]))


def test_check_pd_accepts_identity():
    v = check_pd(_cost(np.eye(3), 2 * np.eye(3), 2))
    assert v.ok and v.block_ok and v.schur_ok


def test_check_pd_rejects_indefinite_schur():
    # R > 0 but Q - S^T R^{-1} S < 0
    W = np.array([[1.0, 2.0], [2.0, 1.0]])
    v = check_pd(_cost(W, 2 * np.eye(2), 1))
    assert not v.ok and not v.schur_ok and v.agree
    assert v.failures


@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_block_and_schur_agree(n, m, seed):
    r = np.random.default_rng(seed)
    Ws = []
    for _ in range(2):
        V = np.linalg.qr(r.standard_normal((n + m, n + m)))[0]
        lam = r.uniform(0.05, 2.0, n + m) * r.choice([-1.0, 1.0], n + m, p=[0.2, 0.8])
        Ws.append(V @ np.diag(lam) @ V.T)
    assert check_pd(_cost(Ws[0], Ws[1], n)).agree


def test_admissible_windows_report():
    spec = example31_spec(1.0, 0.0, 1.0, TimeGrid(0.0, 1.0, 0.1))
    rep = admissible_windows(spec)
    assert rep.kappa1 == pytest.approx(2.0) and rep.kappa2 == pytest.approx(1.0)
    assert rep.has_cross_terms
    assert "not guaranteed" in rep.guarantee_note
    doc = rep.to_dict()
    assert doc["kappa1"] == pytest.approx(2.0)
    assert "kappa1   = 2" in rep.text()

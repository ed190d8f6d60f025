import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mflq.backward import (build_basis, check_bsde_estimate, noise_state, solve_linear_bsde,
                           solve_mfbsde)
from mflq.errors import PreconditionError
from mflq.forward import NoiseBank
from mflq.model import MarkMeasure, TimeGrid, make_spec


def test_deterministic_oracle():
    T = 5.0
    g = TimeGrid(0.0, T, 1e-3)
    spec = make_spec(1, 1, 0, g, A=-2.0)
    f = np.exp(-g.points)[:, None]
    sol = solve_mfbsde(spec, f, 0.0, NoiseBank.for_spec(spec, 0, 1))
    s = g.points
    exact = np.exp(2 * s) * (np.exp(-3 * s) - np.exp(-3 * T)) / 3
    np.testing.assert_allclose(sol.y_mean[:, 0], exact, atol=2e-3)


def test_weight_shift_enters_drift():
    g = TimeGrid(0.0, 5.0, 1e-3)
    spec = make_spec(1, 1, 0, g, A=-2.0)
    f = np.ones((g.size, 1))
    # A_K = A + 2K: with K = 0.5 the decay rate is 1, so y(0) = 1 - e^{-T}
    y0 = solve_mfbsde(spec, f, 0.5, NoiseBank.for_spec(spec, 0, 1)).y_mean[0, 0]
    assert y0 == pytest.approx(1 - np.exp(-5.0), rel=2e-3)


def test_brownian_driver_oracle():
    # f = W gives y = W (1 - e^{-(T-s)}) and z = 1 - e^{-(T-s)}
    T = 2.0
    g = TimeGrid(0.0, T, 1e-2)
    spec = make_spec(1, 1, 1, g, A=-1.0)
    bank = NoiseBank.for_spec(spec, 1, 2000)
    W = bank.brownian_paths()
    sol = solve_mfbsde(spec, W, 0.0, bank, state=noise_state(bank), f_mean=np.zeros((g.size, 1)))
    fac = 1 - np.exp(-(T - g.points))
    err = sol.y[:, :, 0] - W[:, :, 0] * fac
    assert np.sqrt(np.mean(err ** 2)) < 0.02
    np.testing.assert_allclose(sol.y_mean[:, 0], 0.0, atol=1e-12)
    # per-step regression error is about sqrt(2/M); the time average is much tighter
    np.testing.assert_allclose(sol.z_mean[:-1, 0, 0], fac[:-1], atol=4 * np.sqrt(2 / 2000))
    assert np.mean(sol.z_mean[:-1, 0, 0]) == pytest.approx(np.mean(fac[:-1]), abs=0.01)


def test_jump_driver_oracle():
    T = 2.0
    g = TimeGrid(0.0, T, 1e-2)
    mk = MarkMeasure([[[0.0]]], [[2.0]])
    spec = make_spec(1, 1, 0, g, marks=mk, A=-1.0)
    bank = NoiseBank.for_spec(spec, 2, 2000)
    Nt = bank.compensated_paths()
    sol = solve_mfbsde(spec, Nt, 0.0, bank, state=noise_state(bank), f_mean=np.zeros((g.size, 1)))
    fac = 1 - np.exp(-(T - g.points))
    err = sol.y[:, :, 0] - Nt[:, :, 0] * fac
    assert np.sqrt(np.mean(err ** 2)) < 0.08 * np.sqrt(np.mean((Nt[:, :, 0] * fac) ** 2))
    mid = slice(10, g.size // 2)
    np.testing.assert_allclose(sol.k_mean[mid, 0, 0], fac[mid], atol=0.1)


@settings(max_examples=10)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 100))
def test_linear_in_driver(a, b, seed):
    g = TimeGrid(0.0, 1.0, 0.02)
    mk = MarkMeasure([[[0.0]]], [[1.0]])
    spec = make_spec(1, 1, 1, g, marks=mk, A=-1.0, C=0.2, M=0.1)
    bank = NoiseBank.for_spec(spec, seed, 64)
    state = noise_state(bank)
    r = np.random.default_rng(seed)
    f1 = r.standard_normal((64, g.size, 1))
    f2 = np.cumsum(r.standard_normal((64, g.size, 1)), axis=1) * 0.1
    s1 = solve_mfbsde(spec, f1, 0.0, bank, state=state)
    s2 = solve_mfbsde(spec, f2, 0.0, bank, state=state)
    s3 = solve_mfbsde(spec, a * f1 + b * f2, 0.0, bank, state=state)
    np.testing.assert_allclose(s3.y, a * s1.y + b * s2.y, atol=1e-9)
    np.testing.assert_allclose(s3.z, a * s1.z + b * s2.z, atol=1e-9)
    np.testing.assert_allclose(s3.k, a * s1.k + b * s2.k, atol=1e-9)


def test_bsde_estimate_and_window():
    g = TimeGrid(0.0, 5.0, 1e-2)
    mk = MarkMeasure([[[0.0]]], [[1.0]])
    spec = make_spec(2, 1, 1, g, marks=mk, A=-np.eye(2), Abar=0.2 * np.eye(2),
                     C=0.3 * np.eye(2), M=0.2 * np.eye(2))
    bank = NoiseBank.for_spec(spec, 3, 300)
    W = bank.brownian_paths()
    f = np.concatenate([W, np.exp(-g.points)[None, :, None] * np.ones((300, 1, 1))], axis=2)
    sol = solve_mfbsde(spec, f, 0.1, bank, state=noise_state(bank))
    rep = check_bsde_estimate(spec, sol, f, 0.1)
    assert rep.passed and rep.lhs < rep.rhs
    with pytest.raises(PreconditionError, match="backward solvability window"):
        solve_mfbsde(spec, f, 5.0, bank)


def test_basis_drops_degenerate_directions():
    g = TimeGrid(0.0, 1.0, 0.1)
    r = np.random.default_rng(0)
    s = r.standard_normal((100, g.size, 1))
    state = np.concatenate([s, 2 * s, np.ones_like(s)], axis=2)
    basis = build_basis(state, g)
    phi = basis.evaluate(state)
    gram = np.einsum("mkp,mkq->kpq", phi, phi) / 100
    # one live direction plus the constant: the whitened Gram is diag(1, 1, 0, 0)
    np.testing.assert_allclose(gram[3], np.diag([1.0, 1.0, 0.0, 0.0]), atol=1e-10)


def test_terminal_value_projected():
    g = TimeGrid(0.0, 1.0, 0.01)
    spec = make_spec(1, 1, 0, g)
    bank = NoiseBank.for_spec(spec, 0, 1)
    from mflq.backward import adjoint_coefficients
    _, P1, P2, G1, G2, H1, H2 = adjoint_coefficients(spec, 0.0)
    sol = solve_linear_bsde(bank, P1, P2, G1, G2, H1, H2, terminal=np.array([2.0]))
    np.testing.assert_allclose(sol.y_mean[:, 0], 2.0, atol=1e-12)

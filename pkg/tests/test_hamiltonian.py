import warnings
from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg

from mflq.backward import noise_state
from mflq.control import example31_oracle
from mflq.errors import PreconditionError
from mflq.forward import NoiseBank
from mflq.hamiltonian import (WindowWarning, assemble_level, continuation_solve,
                              eliminate_cross_terms, fbsde_residual, hamiltonian_coefficients,
                              solve_base_case, stability_constant, stability_ratio)
from mflq.model import ControlProcess, MarkMeasure, TimeGrid, make_spec
from mflq.spectral import compute_kappas


def _riccati_spec(K=0.0, T=15.0, dt=1e-3):
    A = np.array([[-1.0, 0.3], [0.1, -1.5]])
    return make_spec(2, 1, 0, TimeGrid(0.0, T, dt), x0=[1.0, -0.5], K=K, A=A,
                     Abar=0.2 * np.eye(2), B=[[1.0], [0.5]], Bbar=[[0.2], [0.0]],
                     Q=np.eye(2), Qbar=0.5 * np.eye(2), R=1.0, Rbar=0.5)


@pytest.mark.parametrize("K", [0.0, 0.3])
def test_deterministic_riccati_oracle(K):
    spec = _riccati_spec(K)
    c, cost = spec.coeffs, spec.cost
    P2 = scipy.linalg.solve_continuous_are(c.A[0] + c.Abar[0] + K * np.eye(2), c.B[0] + c.Bbar[0],
                                           cost.Q[0] + cost.Qbar[0], cost.R[0] + cost.Rbar[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WindowWarning)
        sol, state = continuation_solve(spec, NoiseBank.for_spec(spec, 0, 1), K=K)
    g = spec.grid
    head = g.points <= g.T / 3
    pred = sol.x_mean[head] @ P2.T
    err = np.max(np.abs(sol.y_mean[head] - pred)) / np.max(np.abs(pred))
    assert err < 5e-3
    assert state.alpha == 1.0 and state.max_rhat < 1.0


def test_level_structure_at_endpoints():
    mk = MarkMeasure([[[0.0]]], [[1.0]])
    spec = make_spec(2, 1, 1, TimeGrid(0.0, 1.0, 0.1), marks=mk, A=-np.eye(2), Abar=0.1 * np.eye(2),
                     B=[[1.0], [0.0]], C=0.2 * np.eye(2), Cbar=0.1 * np.eye(2), M=0.3 * np.eye(2),
                     Q=np.eye(2), Qbar=np.eye(2))
    k1, k2, _ = compute_kappas(spec)
    K = 0.2
    top = assemble_level(spec, 1.0, K, k1, k2)
    ref = hamiltonian_coefficients(spec, K)
    for name, val in ref.items():
        np.testing.assert_allclose(getattr(top, name), val, atol=1e-15, err_msg=name)
    base = assemble_level(spec, 0.0, K, k1, k2)
    np.testing.assert_allclose(base.F, np.broadcast_to(-k1 * np.eye(2), base.F.shape))
    np.testing.assert_allclose(base.P1, np.broadcast_to(-k2 * np.eye(2), base.P1.shape))
    assert not np.any(base.Qc1) and not np.any(base.Gf)
    # the control coupling is present at every level
    np.testing.assert_allclose(base.B[0], top.B[0])


def test_base_case_decoupled_solution():
    spec = _riccati_spec(T=5.0, dt=1e-2)
    sol = solve_base_case(spec, NoiseBank.for_spec(spec, 0, 1))
    k1, _, _ = compute_kappas(spec)
    assert not np.any(sol.y)
    np.testing.assert_allclose(sol.x_mean[-1], spec.x0_law.mean * (1 - k1 * 1e-2) ** 500, rtol=1e-10)


def test_example_continuation_matches_closed_form():
    ex = example31_oracle(1.0, 0.0, 1.0, TimeGrid(0.0, 10.0, 1e-2))
    ts = ex.transformed
    sol, _ = continuation_solve(ts.spec, NoiseBank.for_spec(ts.spec, 0, 16))
    assert np.max(np.abs(sol.x[:, :, 0] - ex.x)) < 3e-2
    assert np.max(np.abs(sol.y)) < 1e-12 and np.max(np.abs(sol.z)) < 1e-12
    res = fbsde_residual(ts.spec, sol)
    assert res.forward < 1e-8 and res.backward < 1e-8


def test_residual_detects_perturbation():
    spec = _riccati_spec(T=8.0, dt=1e-2)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WindowWarning)
        sol, _ = continuation_solve(spec, NoiseBank.for_spec(spec, 0, 1))
    ok = fbsde_residual(spec, sol)
    bad = fbsde_residual(spec, replace(sol, y=1.1 * sol.y, y_mean=1.1 * sol.y_mean))
    assert max(ok.forward, ok.backward) < 1e-6
    assert max(bad.forward, bad.backward) > 1e-2


def test_refuses_cross_terms_and_out_of_window():
    ex = example31_oracle(1.0, 0.0, 1.0, TimeGrid(0.0, 2.0, 1e-2))
    bank = NoiseBank.for_spec(ex.spec, 0, 4)
    with pytest.raises(PreconditionError, match="cross terms"):
        continuation_solve(ex.spec, bank)
    with pytest.raises(PreconditionError, match="solvability window"):
        continuation_solve(ex.transformed.spec, bank, K=0.5)


def test_transform_removes_cross_terms_and_roundtrips(rng):
    g = TimeGrid(0.0, 1.0, 0.1)
    spec = make_spec(2, 2, 1, g, A=-np.eye(2), B=rng.standard_normal((2, 2)),
                     Q=2 * np.eye(2), R=np.eye(2), Rbar=np.eye(2),
                     S=0.3 * rng.standard_normal((2, 2)), Sbar=0.2 * rng.standard_normal((2, 2)))
    ts = eliminate_cross_terms(spec)
    assert not ts.spec.cost.has_cross_terms()
    x = rng.standard_normal((5, g.size, 2))
    xm = x.mean(axis=0)
    u = ControlProcess.from_paths(rng.standard_normal((5, g.size, 2)))
    back = ts.from_transformed(ts.to_transformed(u, x, xm), x, xm)
    np.testing.assert_allclose(back.paths, u.paths, atol=1e-14)
    np.testing.assert_allclose(back.mean, u.mean, atol=1e-14)


def test_example_transform_coefficients():
    ex = example31_oracle(1.0, 0.0, 1.0, TimeGrid(0.0, 1.0, 0.1))
    c, cost = ex.transformed.spec.coeffs, ex.transformed.spec.cost
    np.testing.assert_allclose(c.A + c.Abar, -0.5, atol=1e-14)
    np.testing.assert_allclose(c.A, -0.5, atol=1e-14)
    np.testing.assert_allclose(c.C + c.Cbar, 0.0, atol=1e-14)
    np.testing.assert_allclose(cost.Q + cost.Qbar, 0.0, atol=1e-14)


def test_stability_ratio_bounded_by_fitted_constant(rng):
    mk = MarkMeasure([[[0.0]]], [[1.0]])
    g = TimeGrid(0.0, 3.0, 0.02)
    spec = make_spec(2, 1, 1, g, marks=mk, A=-np.eye(2) + 0.1 * rng.standard_normal((2, 2)),
                     B=[[0.5], [0.2]], C=0.2 * np.eye(2), D=[[0.1], [0.0]], M=0.2 * np.eye(2),
                     Q=np.eye(2), Qbar=0.3 * np.eye(2))
    bank = NoiseBank.for_spec(spec, 1, 32)
    kw = dict(K=0.0, fixed_state=noise_state(bank), tol=1e-10, delta0=0.25)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WindowWarning)
        C, gram, _ = stability_constant(spec, bank, **kw)
        for _ in range(3):
            xa, xb = rng.standard_normal((2, 2))
            ra = continuation_solve(spec, bank, xi=xa, **kw)[0]
            rb = continuation_solve(spec, bank, xi=xb, **kw)[0]
            rep = stability_ratio(ra, rb)
            v = xa - xb
            assert rep.ratio == pytest.approx(v @ gram @ v / (v @ v), rel=1e-5)
            assert rep.ratio <= C * (1 + 1e-6)

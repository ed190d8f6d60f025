import warnings

import numpy as np
import pytest

from mflq.control import (evaluate_cost, example31_oracle, optimize, probe_direction,
                          quadratic_expansion_check, synthesize_control)
from mflq.forward import NoiseBank, simulate_mfsde
from mflq.hamiltonian import QuadrupleSolution, WindowWarning, eliminate_cross_terms
from mflq.model import ControlProcess, MarkMeasure, TimeGrid, make_spec


def test_synthesize_hand_case():
    g = TimeGrid(0.0, 1.0, 0.5)
    spec = make_spec(1, 1, 1, g, B=1.0, D=1.0, R=2.0, Rbar=2.0)
    M, G = 4, g.size
    xi = np.array([1.0, -1.0, 2.0, -2.0])[:, None, None] * np.ones((1, G, 1))
    y = 3.0 + xi
    z = np.ones((M, G, 1, 1))
    zero = np.zeros((M, G, 0, 1))
    sol = QuadrupleSolution(np.zeros((M, G, 1)), np.zeros((G, 1)), y, np.full((G, 1), 3.0), z,
                            np.ones((G, 1, 1)), zero, np.zeros((G, 0, 1)), None, None, 0.0, 1.0)
    u = synthesize_control(sol, spec)
    # u = -(R^1)^{-1} (B y1 + D z1) - (R^2)^{-1} (B Ey + D Ez) = -xi/2 - (3 + 1)/4
    np.testing.assert_allclose(u.mean[:, 0], -1.0)
    np.testing.assert_allclose(u.paths[:, :, 0], -xi[:, :, 0] / 2 - 1.0)


def test_cost_closed_form():
    g = TimeGrid(0.0, 30.0, 1e-3)
    spec = make_spec(1, 1, 0, g, Q=1.0, Qbar=1.0)
    x = np.exp(-g.points)[None, :, None]
    u = ControlProcess.zero(1, g, 1)
    # 1/2 int (x^2 + (Ex)^2) ds = 1/2
    assert evaluate_cost(spec, (x, x[0], g), u) == pytest.approx(0.5, rel=1e-6)


def test_cost_weight():
    g = TimeGrid(0.0, 30.0, 1e-3)
    spec = make_spec(1, 1, 0, g, Q=1.0)
    x = np.exp(-g.points)[None, :, None]
    u = ControlProcess.zero(1, g, 1)
    # 1/2 int e^{2Ks} e^{-2s} ds = 1/(4 (1 - K))
    assert evaluate_cost(spec, (x, x[0], g), u, K=0.5) == pytest.approx(0.5, rel=1e-5)


def _random_problem(seed, T=3.0, dt=1e-2):
    r = np.random.default_rng(seed)
    mk = MarkMeasure([[[0.0]]], [[1.0]])
    return make_spec(2, 1, 1, TimeGrid(0.0, T, dt), marks=mk, x0=[1.0, -1.0],
                     A=-np.eye(2) + 0.1 * r.standard_normal((2, 2)), Abar=0.1 * np.eye(2),
                     B=r.standard_normal((2, 1)) * 0.5, C=0.2 * np.eye(2), D=[[0.2], [0.0]],
                     M=0.2 * np.eye(2), N=[[0.1], [0.1]], Q=np.eye(2), Qbar=0.5 * np.eye(2),
                     R=1.0, Rbar=0.5)


def test_optimize_expansion_identity_and_optimality():
    spec = _random_problem(0)
    bank = NoiseBank.for_spec(spec, 1, 200)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WindowWarning)
        res = optimize(spec, bank, num_probes=2, probe_eps=(-0.1, 0.1))
    rep = res.report
    assert rep.expansion_error <= 1e-6
    for row in rep.expansion:
        assert row.second_order >= 0.0
    # perturbing u* never lowers the cost beyond the regression error
    assert all(p["dJ"] > -1e-3 * rep.cost for p in rep.probes)


def test_expansion_identity_holds_for_any_control():
    spec = _random_problem(1)
    bank = NoiseBank.for_spec(spec, 2, 100)
    u = probe_direction(bank, 1, 5)
    dirs = [probe_direction(bank, 1, 6)]
    rows = quadratic_expansion_check(spec, bank, u, dirs, (0.5, -0.25), 0.0, "exact")
    assert max(r.error for r in rows) < 1e-10


def test_optimal_control_invariant_to_cost_scaling():
    spec = _random_problem(3)
    bank = NoiseBank.for_spec(spec, 4, 64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WindowWarning)
        a = optimize(spec, bank, num_probes=0, check=False, tol=1e-10)
        b = optimize(spec.with_cost(spec.cost.scaled(3.0)), bank, num_probes=0, check=False,
                     tol=1e-10)
    np.testing.assert_allclose(b.control.paths, a.control.paths, atol=1e-6)
    assert b.report.cost == pytest.approx(3.0 * a.report.cost, rel=1e-6)


def test_transform_preserves_cost(rng):
    ex = example31_oracle(1.0, 0.0, 1.0, TimeGrid(0.0, 3.0, 1e-2))
    ts = eliminate_cross_terms(ex.spec)
    bank = NoiseBank.for_spec(ex.spec, 0, 50)
    u = probe_direction(bank, 1, 3)
    ens = simulate_mfsde(ex.spec, bank, u, mode="empirical")
    bu = ts.to_transformed(u, ens.states, ens.mean_track)
    ens_t = simulate_mfsde(ts.spec, bank, bu, mode="empirical")
    np.testing.assert_allclose(ens_t.states, ens.states, atol=1e-12)
    assert evaluate_cost(ts.spec, ens_t, bu) == pytest.approx(evaluate_cost(ex.spec, ens, u), rel=1e-10)


def test_example_optimize_end_to_end():
    ex = example31_oracle(1.0, 0.0, 1.0, TimeGrid(0.0, 10.0, 1e-3))
    res = optimize(ex.spec, NoiseBank.for_spec(ex.spec, 0, 8), num_probes=1)
    assert np.max(np.abs(res.ensemble.states[:, :, 0] - ex.x)) < 1e-3
    assert np.max(np.abs(res.control.paths[:, :, 0] - ex.u)) < 2e-3
    assert res.report.cost < 1e-6
    assert res.transformed is not None


def test_probe_direction_adapted_and_decaying():
    g = TimeGrid(0.0, 10.0, 1e-2)
    bank = NoiseBank(0, 20, g, 1)
    v = probe_direction(bank, 2, 0, K=0.0)
    assert v.paths.shape == (20, g.size, 2)
    # at t0 no noise has been observed yet, so all paths agree
    np.testing.assert_allclose(v.paths[:, 0] - v.paths[0, 0], 0.0, atol=1e-14)
    assert np.max(np.abs(v.paths[:, -1])) < 1e-2 * np.max(np.abs(v.paths))

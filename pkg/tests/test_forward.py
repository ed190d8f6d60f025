import numpy as np
import pytest

from mflq.errors import PreconditionError
from mflq.forward import NoiseBank, check_decay, check_sde_estimate, simulate_mfsde
from mflq.model import (ControlProcess, FeedbackControl, ForcingTuple, MarkMeasure, TimeGrid,
                        make_spec)


def test_deterministic_mean_field_decay():
    g = TimeGrid(0.0, 5.0, 1e-3)
    spec = make_spec(1, 1, 0, g, x0=[1.0], A=-1.0, Abar=0.5)
    ens = simulate_mfsde(spec, NoiseBank.for_spec(spec, 0, 3), mode="exact")
    np.testing.assert_allclose(ens.states[0, :, 0], np.exp(-0.5 * g.points), atol=1e-3)
    np.testing.assert_allclose(ens.mean_track[:, 0], ens.states[0, :, 0], atol=1e-12)


def test_geometric_second_moment():
    a, c = -1.0, 0.5
    g = TimeGrid(0.0, 1.0, 1e-2)
    spec = make_spec(1, 1, 1, g, x0=[1.0], A=a, C=c)
    ens = simulate_mfsde(spec, NoiseBank.for_spec(spec, 1, 20000))
    x2 = ens.states[:, -1, 0] ** 2
    exact = np.exp(2 * a + c * c)
    se = x2.std() / np.sqrt(x2.size)
    assert abs(x2.mean() - exact) < 4 * se + 0.02 * exact  # MC error plus Euler bias
    np.testing.assert_allclose(ens.mean_track[-1, 0], (1 + a * g.dt) ** g.num_steps, rtol=1e-12)


def test_additive_noise_variance():
    a, s = -1.0, 0.7
    g = TimeGrid(0.0, 3.0, 1e-2)
    spec = make_spec(1, 1, 1, g, x0=[0.0], A=a)
    forcing = ForcingTuple(diffusion=np.full((g.size, 1, 1), s))
    ens = simulate_mfsde(spec, NoiseBank.for_spec(spec, 2, 20000), forcing=forcing)
    var = ens.states[:, -1, 0].var()
    exact = s * s * (1 - np.exp(2 * a * 3.0)) / (-2 * a)
    assert var == pytest.approx(exact, rel=0.05)


def test_compensated_jumps_have_zero_mean_effect():
    g = TimeGrid(0.0, 2.0, 1e-2)
    mk = MarkMeasure([[[1.0], [2.0]]], [[1.0, 0.5]])
    spec = make_spec(1, 1, 0, g, marks=mk, x0=[1.0], A=-1.0, M=0.3)
    bank = NoiseBank.for_spec(spec, 3, 20000)
    exact = simulate_mfsde(spec, bank, mode="exact")
    emp = simulate_mfsde(spec, bank, mode="empirical")
    assert np.max(np.abs(emp.mean_track - exact.mean_track)) < 0.02
    np.testing.assert_allclose(emp.mean_track, emp.states.mean(axis=0), atol=1e-12)


def test_noise_bank_common_random_numbers():
    g = TimeGrid(0.0, 4.0, 1e-2)
    mk = MarkMeasure([[[0.0]]], [[2.0]])
    a = NoiseBank(7, 10, g, 2, mk)
    b = NoiseBank(7, 10, g, 2, mk)
    np.testing.assert_array_equal(a.dW, b.dW)
    np.testing.assert_array_equal(a.counts, b.counts)
    longer = NoiseBank(7, 10, g.with_horizon(8.0), 2, mk)
    np.testing.assert_array_equal(longer.dW[:, :a.dW.shape[1]], a.dW)
    np.testing.assert_array_equal(longer.counts[:, :a.counts.shape[1]], a.counts)
    assert not np.array_equal(NoiseBank(8, 10, g, 2, mk).dW, a.dW)


def test_feedback_matches_open_loop():
    g = TimeGrid(0.0, 1.0, 1e-2)
    spec = make_spec(1, 1, 1, g, x0=[1.0], A=-1.0, B=1.0, C=0.2, D=0.3)
    bank = NoiseBank.for_spec(spec, 4, 50)
    gain = np.full((g.size, 1, 1), -0.5)
    fb = simulate_mfsde(spec, bank, FeedbackControl(gain, np.zeros_like(gain)), mode="empirical")
    # the closed-loop state and control reproduce themselves as an open-loop input
    ol = simulate_mfsde(spec, bank, fb.control, mode="empirical")
    np.testing.assert_allclose(ol.states, fb.states, atol=1e-12)


def test_sde_estimate_holds_and_window_enforced():
    g = TimeGrid(0.0, 5.0, 1e-2)
    mk = MarkMeasure([[[0.0]]], [[1.0]])
    spec = make_spec(2, 1, 1, g, marks=mk, x0=[1.0, -0.5], A=-np.eye(2),
                     C=0.3 * np.eye(2), M=0.2 * np.eye(2), B=[[1.0], [0.0]])
    bank = NoiseBank.for_spec(spec, 5, 500)
    forcing = ForcingTuple(drift=np.outer(np.exp(-g.points), [1.0, 0.0]))
    u = ControlProcess.deterministic(0.1 * np.exp(-g.points)[:, None], 500)
    ens = simulate_mfsde(spec, bank, u, forcing=forcing)
    rep = check_sde_estimate(spec, ens, forcing, K=0.2)
    assert rep.passed and rep.slack > 0
    with pytest.raises(PreconditionError, match="window"):
        check_sde_estimate(spec, ens, forcing, K=5.0)


def test_decay_flags():
    g = TimeGrid(0.0, 20.0, 1e-2)
    spec = make_spec(1, 1, 0, g, x0=[1.0], A=-1.0)
    ens = simulate_mfsde(spec, NoiseBank.for_spec(spec, 0, 2))
    assert check_decay(ens, 0.0).decayed
    assert not check_decay(ens, 1.5).decayed

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longidiff.scheduler import Schedule, make_schedule, q_sample, q_step, reverse_step, training_loss
from longidiff.tensor import Tensor


def test_constant_betas_products():
    s = Schedule.from_betas([0.1, 0.1, 0.1])
    expected, acc = [], 1.0
    for b in [0.1, 0.1, 0.1]:
        acc *= 1.0 - b
        expected.append(acc)
    np.testing.assert_allclose(s.alpha_bars[1:], expected, rtol=1e-15)
    assert s.alpha_bars[0] == 1.0 and s.T == 3


def test_equal_endpoints_give_constant_beta():
    s = make_schedule(5, 0.02, 0.02)
    np.testing.assert_allclose(s.betas[1:], 0.02)


def test_single_step():
    s = make_schedule(1, 0.3, 0.3)
    assert s.alpha_bars[1] == pytest.approx(0.7)


def test_default_schedule_monotone():
    s = make_schedule()
    assert s.T == 50
    assert s.betas[1] == pytest.approx(1e-4) and s.betas[50] == pytest.approx(0.2)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.alpha_bars[1:] > 0) & (s.alpha_bars[1:] < 1))
    np.testing.assert_allclose(s.alpha_bars[1:], s.alpha_bars[:-1] * (1 - s.betas[1:]))


def test_invalid_schedules_rejected():
    with pytest.raises(ValueError):
        make_schedule(0)
    with pytest.raises(ValueError):
        make_schedule(10, 0.3, 0.1)


def test_q_sample_hand_value():
    s = Schedule.from_betas([0.02])
    assert q_sample(s, np.array(1.0), 1, np.array(1.0)) == pytest.approx(1.1313708498984762, abs=1e-12)


def test_q_sample_noiseless_and_deterministic_branch():
    z0 = np.random.default_rng(0).standard_normal((3, 2))
    s = Schedule.from_betas([0.0] * 4)
    np.testing.assert_array_equal(q_sample(s, z0, 4, np.ones_like(z0)), z0)
    s = Schedule.from_betas([0.75])
    np.testing.assert_allclose(q_sample(s, z0, 1, np.zeros_like(z0)), 0.5 * z0)


def test_q_sample_per_sample_steps():
    s = make_schedule(10)
    z0 = np.ones((2, 3))
    out = q_sample(s, z0, np.array([1, 10]), np.zeros_like(z0))
    np.testing.assert_allclose(out[0], np.sqrt(s.alpha_bars[1]))
    np.testing.assert_allclose(out[1], np.sqrt(s.alpha_bars[10]))


def test_q_sample_rejects_bad_step():
    with pytest.raises(ValueError):
        q_sample(make_schedule(5), np.zeros(2), 0, np.zeros(2))


def test_markov_chain_matches_closed_form_moments():
    s = make_schedule(8, 0.01, 0.3)
    rng = np.random.default_rng(0)
    z = np.full(200_000, 0.7)
    for t in range(1, 9):
        z = q_step(s, z, t, rng.standard_normal(z.shape))
    assert abs(z.mean() - np.sqrt(s.alpha_bars[8]) * 0.7) < 4 * np.sqrt((1 - s.alpha_bars[8]) / z.size)
    assert abs(z.var() - (1 - s.alpha_bars[8])) < 0.01


def test_reverse_noiseless_is_identity():
    s = Schedule.from_betas([0.0, 0.0])
    zt = np.random.default_rng(1).standard_normal(4)
    np.testing.assert_array_equal(reverse_step(s, zt, np.ones(4), 2, np.ones(4)), zt)


def test_reverse_inverts_single_step():
    s = Schedule.from_betas([0.3])
    rng = np.random.default_rng(2)
    z0, eps = rng.standard_normal(6), rng.standard_normal(6)
    zt = q_sample(s, z0, 1, eps)
    np.testing.assert_allclose(reverse_step(s, zt, eps, 1, None), z0, atol=1e-12)


def test_final_step_ignores_noise():
    s = make_schedule(5)
    zt, e = np.ones(3), np.zeros(3)
    np.testing.assert_array_equal(reverse_step(s, zt, e, 1, np.full(3, 100.0)), reverse_step(s, zt, e, 1, None))
    assert s.sigma(1) == 0.0


def test_posterior_variance_formula():
    s = make_schedule(6, 0.05, 0.2)
    for t in range(2, 7):
        ref = s.betas[t] * (1 - s.alpha_bars[t - 1]) / (1 - s.alpha_bars[t])
        assert s.sigma(t) ** 2 == pytest.approx(ref)


def test_loss_zero_at_truth_and_one_for_zero_prediction():
    rng = np.random.default_rng(0)
    eps = rng.standard_normal((10, 10_000))
    w = np.ones(10)
    assert training_loss(eps, Tensor(eps.copy()), w).item() == 0.0
    assert training_loss(eps, Tensor(np.zeros_like(eps)), w).item() == pytest.approx(1.0, abs=0.05)


def test_loss_ignores_masked_frames():
    rng = np.random.default_rng(3)
    eps = rng.standard_normal((3, 4, 2))
    pred = rng.standard_normal((3, 4, 2))
    w = np.array([1.0, 0.0, 1.0])
    base = training_loss(eps, Tensor(pred), w).item()
    pred2 = pred.copy()
    pred2[1] += 50.0
    assert training_loss(eps, Tensor(pred2), w).item() == base
    with pytest.raises(ValueError):
        training_loss(eps, Tensor(pred), np.zeros(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.floats(1e-5, 0.05), st.floats(0.05, 0.5))
def test_alpha_bar_invariants(T, lo, hi):
    s = make_schedule(T, lo, hi)
    ab = s.alpha_bars
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    np.testing.assert_allclose(ab[1:], np.cumprod(1 - s.betas[1:]))

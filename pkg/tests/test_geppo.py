import numpy as np
import pytest

from approximator import flat_grad, init_policy, policy_logprob
from geppo import (ClipConfig, LrController, Minibatch, UpdateReport, clipped_objective, generalized_clip,
                   geppo_loss, lr_update, ppo_loss, ppo_objective, tv_from_logprobs)


@pytest.fixture
def params():
    return init_policy(3, 2, (8,), np.random.default_rng(0), [-1.0, -1.0], [1.0, 1.0])


def test_generalized_clip_band():
    np.testing.assert_allclose(generalized_clip([0.5, 1.0, 2.0], [1.0, 1.0, 1.5], 0.2), [0.8, 1.0, 1.7])
    with pytest.raises(ValueError):
        generalized_clip([1.0], [0.0], 0.2)


def test_clip_config_range():
    with pytest.raises(ValueError):
        ClipConfig(0.0)
    with pytest.raises(ValueError):
        ClipConfig(1.0)


def test_ppo_loss_examples():
    clip = ClipConfig(0.2)
    value, slope = ppo_loss([1.5], [1.0], clip)
    assert value[0] == pytest.approx(1.2)
    assert slope[0] == 0.0
    value, slope = ppo_loss([1.5], [-1.0], clip)
    assert value[0] == pytest.approx(-1.5)
    assert slope[0] == -1.0
    value, _ = ppo_loss([0.5], [1.0], clip)
    assert value[0] == pytest.approx(0.5)


def test_generalized_objective_clips_around_center():
    value, slope = clipped_objective([2.0], [1.5], [1.0], 0.2)
    assert value[0] == pytest.approx(1.7)
    assert slope[0] == 0.0
    value, slope = clipped_objective([1.6], [1.5], [1.0], 0.2)
    assert value[0] == pytest.approx(1.6)
    assert slope[0] == 1.0


def test_generalized_objective_with_unit_center_is_ppo():
    rng = np.random.default_rng(1)
    ratio, adv = rng.uniform(0.5, 1.5, size=50), rng.normal(size=50)
    a = clipped_objective(ratio, np.ones(50), adv, 0.2)
    b = ppo_loss(ratio, adv, ClipConfig(0.2))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_geppo_loss_with_fresh_data_equals_ppo_objective(params):
    rng = np.random.default_rng(2)
    n = 32
    states, actions = rng.normal(size=(n, 3)), rng.normal(size=(n, 2))
    logp, _ = policy_logprob(params, states, actions, need_grad=False)
    old = logp + rng.normal(scale=0.2, size=n)
    adv = rng.normal(size=n)
    batch = Minibatch(states, actions, old, np.ones(n), adv, np.ones(n))
    clip = ClipConfig(0.2)
    geppo = geppo_loss(params, batch, clip)
    ppo = ppo_objective(params, states, actions, old, adv, clip)
    assert geppo.objective == ppo.objective
    np.testing.assert_array_equal(flat_grad(geppo.surrogate, params), flat_grad(ppo.surrogate, params))
    assert geppo.clip_fraction == ppo.clip_fraction


def test_geppo_loss_hand_computed(params):
    rng = np.random.default_rng(5)
    states, actions = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
    logp, _ = policy_logprob(params, states, actions, need_grad=False)
    # every ratio starts at 1; the second sample has no usable center
    centers = np.array([1.0, np.inf, 1.5, 0.5])
    advantages = np.array([-1.0, 7.0, 0.0, 2.0])  # center * A = -1, 0, 1 over the kept samples
    weights = np.array([2.0, 3.0, 1.0, 0.5])
    result = geppo_loss(params, Minibatch(states, actions, logp, centers, advantages, weights), ClipConfig(0.2))

    s = np.sqrt(1.5)  # standardized starting points are -s, 0, s
    # sample 0: ratio 1 inside [0.8, 1.2], value -s; sample 2: A = 0; sample 3: A = 2s, ratio clipped to 0.7
    expected = (2.0 * -s + 1.0 * 0.0 + 0.5 * 0.7 * 2 * s) / 3
    assert result.objective == pytest.approx(expected, rel=1e-12)
    assert result.objective == pytest.approx(-1.3 * s / 3, rel=1e-12)
    assert result.clip_fraction == pytest.approx(2 / 3)
    assert result.rejected == 1
    assert not result.degenerate


def test_geppo_loss_rejects_invalid_samples(params):
    rng = np.random.default_rng(3)
    n = 8
    states, actions = rng.normal(size=(n, 3)), rng.normal(size=(n, 2))
    centers = np.ones(n)
    centers[0] = np.inf
    batch = Minibatch(states, actions, np.zeros(n), centers, rng.normal(size=n), np.ones(n))
    assert geppo_loss(params, batch, ClipConfig(0.2)).rejected == 1
    all_bad = Minibatch(states, actions, np.zeros(n), np.full(n, np.inf), rng.normal(size=n), np.ones(n))
    with pytest.raises(ValueError):
        geppo_loss(params, all_bad, ClipConfig(0.2))


def test_geppo_loss_flags_degenerate_minibatch(params):
    n = 4
    batch = Minibatch(np.zeros((n, 3)), np.zeros((n, 2)), np.zeros(n), np.ones(n), np.full(n, 2.0), np.ones(n))
    assert geppo_loss(params, batch, ClipConfig(0.2)).degenerate


def test_tv_estimate_zero_for_unchanged_policy():
    rng = np.random.default_rng(4)
    cur, beh = rng.normal(size=20), rng.normal(size=20)
    assert tv_from_logprobs(np.ones(20), cur, cur, beh) == 0.0


def test_tv_estimate_arithmetic():
    weights = np.array([1.0, 3.0])
    cand = np.log([0.6, 0.2])
    cur = np.log([0.4, 0.4])
    beh = np.log([0.5, 0.5])
    # |1.2 - 0.8| = 0.4 and |0.4 - 0.8| = 0.4
    assert tv_from_logprobs(weights, cand, cur, beh) == pytest.approx(0.5 * (1.0 * 0.4 + 3.0 * 0.4) / 4.0)


def test_tv_estimate_standard_error_shrinks_with_samples():
    rng = np.random.default_rng(6)

    def spread(n, trials=2000):
        estimates = [tv_from_logprobs(np.ones(n), rng.normal(scale=0.2, size=n), np.zeros(n), np.zeros(n))
                     for _ in range(trials)]
        return np.std(estimates, ddof=1)

    assert spread(400) / spread(200) == pytest.approx(1 / np.sqrt(2), abs=0.06)


def test_lr_controller_branches():
    ctrl = LrController(eta=1e-3, epsilon=0.2)
    assert ctrl.target == pytest.approx(0.1)
    shrunk, branch = lr_update(ctrl, 0.11)
    assert branch == "shrink"
    assert shrunk.eta == pytest.approx(1e-3 / 1.03, rel=1e-15)
    grown, branch = lr_update(ctrl, 0.04)
    assert branch == "grow"
    assert grown.eta == pytest.approx(1e-3 * 1.03, rel=1e-15)
    held, branch = lr_update(ctrl, 0.07)
    assert branch == "hold"
    assert held.eta == 1e-3


def test_lr_controller_boundaries_hold():
    ctrl = LrController(eta=1e-3, epsilon=0.2)
    assert lr_update(ctrl, 0.1)[1] == "hold"
    assert lr_update(ctrl, 0.05)[1] == "hold"


def test_lr_controller_validation():
    with pytest.raises(ValueError):
        LrController(eta=0.0, epsilon=0.2)
    with pytest.raises(ValueError):
        LrController(eta=1e-3, epsilon=0.2, beta=1.5)
    with pytest.raises(ValueError):
        lr_update(LrController(eta=1e-3, epsilon=0.2), -0.1)


def test_update_report_rejects_negative_tv():
    with pytest.raises(ValueError):
        UpdateReport(iteration=0, tv_hat=-1.0, eta_before=1.0, eta_after=1.0, branch="hold",
                     clip_frac=0.0, loss=0.0, value_loss=0.0)

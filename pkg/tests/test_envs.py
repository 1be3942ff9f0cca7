import numpy as np
import pytest

from approximator import init_policy
from envs import (Env, EnvError, EnvState, RunningNormalizer, Sampler, TrajectoryBatch, evaluate_policy, get_spec,
                  normalize_obs, rollout, step, wrap_angle)


def make_policy(spec, seed=0):
    return init_policy(spec.obs_dim, spec.act_dim, (16,), np.random.default_rng(seed),
                       spec.action_low, spec.action_high)


def test_unknown_env():
    with pytest.raises(EnvError):
        get_spec("half_cheetah")


def test_step_is_pure():
    spec = get_spec("point_mass")
    state = EnvState(np.array([0.5, -0.5, 0.1, 0.0]), 0)
    first = step(spec, state, [0.3, -0.2])
    second = step(spec, state, [0.3, -0.2])
    np.testing.assert_array_equal(first[0].physics, second[0].physics)
    assert first[1] == second[1]
    np.testing.assert_array_equal(state.physics, [0.5, -0.5, 0.1, 0.0])


def test_actions_are_clipped():
    spec = get_spec("point_mass")
    state = EnvState(np.zeros(4), 0)
    big = step(spec, state, [50.0, -50.0])
    bounded = step(spec, state, [1.0, -1.0])
    np.testing.assert_array_equal(big[0].physics, bounded[0].physics)
    assert big[1] == bounded[1]


def test_invalid_actions_rejected():
    spec = get_spec("pendulum")
    with pytest.raises(EnvError):
        step(spec, EnvState(np.zeros(2), 0), [np.nan])
    with pytest.raises(EnvError):
        step(spec, EnvState(np.zeros(2), 0), [0.0, 0.0])


def test_point_mass_reward_range_and_walls():
    spec = get_spec("point_mass")
    rng = np.random.default_rng(0)
    env = Env(spec)
    env.reset(rng)
    for _ in range(spec.max_episode_steps):
        obs, reward, terminal, truncated = env.step(rng.uniform(-1, 1, size=2))
        assert -2 * np.sqrt(2) - 0.02 - 1e-12 <= reward <= 0.0
        assert np.all(np.abs(obs[:2]) <= 2.0)
        assert not terminal
    assert truncated


def test_pendulum_observation_and_speed_limit():
    spec = get_spec("pendulum")
    state = EnvState(np.array([np.pi - 0.01, 7.9]), 0)
    for _ in range(50):
        state, reward, _, _ = step(spec, state, [2.0])
        assert abs(state.physics[1]) <= 8.0
        assert reward <= 0.0
    env = Env(spec)
    obs = env.reset(np.random.default_rng(1))
    assert obs.shape == (3,)
    assert obs[0] ** 2 + obs[1] ** 2 == pytest.approx(1.0)


def test_pendulum_upright_at_rest_has_zero_cost():
    _, reward, _, _ = step(get_spec("pendulum"), EnvState(np.zeros(2), 0), [0.0])
    assert reward == 0.0


def test_wrap_angle():
    np.testing.assert_allclose(wrap_angle(np.array([0.0, 2 * np.pi, 3 * np.pi / 2])), [0.0, 0.0, -np.pi / 2],
                               atol=1e-12)


def test_time_limit_truncation():
    spec = get_spec("point_mass")
    state = EnvState(np.zeros(4), spec.max_episode_steps - 1)
    _, _, terminal, truncated = step(spec, state, [0.0, 0.0])
    assert truncated and not terminal


def test_rollout_is_deterministic_and_carries_logprobs():
    spec = get_spec("point_mass")
    policy = make_policy(spec)
    a = rollout(policy, spec, 250, rng_seed=3)
    b = rollout(policy, "point_mass", 250, rng_seed=3)
    assert len(a) == 250
    assert a.digest() == b.digest()
    assert a.truncations.sum() == 2
    assert not a.terminals.any()
    assert np.all(a.policy_ages == 0)
    assert np.all(np.isfinite(a.behavior_logprobs))


def test_rollout_truncates_every_episode_length():
    spec = get_spec("point_mass")
    batch = rollout(make_policy(spec), spec, 250, rng_seed=5)
    assert spec.max_episode_steps == 100
    assert batch.truncations[:200].sum() == 2
    np.testing.assert_array_equal(np.flatnonzero(batch.truncations), [99, 199])


def test_sampler_continues_episodes_across_batches():
    spec = get_spec("point_mass")
    sampler = Sampler(spec, np.random.default_rng(4))
    policy = make_policy(spec)
    first = sampler.collect(policy, 60)
    second = sampler.collect(policy, 60)
    assert not first.dones.any()
    np.testing.assert_array_equal(second.states[0], first.next_states[-1])
    assert second.truncations[39]


def test_trajectory_batch_validation():
    n = 3
    with pytest.raises(EnvError):
        TrajectoryBatch(np.zeros((n, 1)), np.zeros((n, 1)), np.zeros(n), np.zeros((n, 1)),
                        np.ones(n, dtype=bool), np.ones(n, dtype=bool), np.zeros(n), np.zeros(n, dtype=np.int64))
    with pytest.raises(EnvError):
        TrajectoryBatch(np.zeros((n, 1)), np.zeros((n, 1)), np.zeros(n + 1), np.zeros((n, 1)),
                        np.zeros(n, dtype=bool), np.zeros(n, dtype=bool), np.zeros(n), np.zeros(n, dtype=np.int64))


def test_trajectory_jsonl(tmp_path):
    batch = rollout(make_policy(get_spec("pendulum")), "pendulum", 5, rng_seed=0)
    path = tmp_path / "batch.jsonl"
    batch.to_jsonl(path)
    lines = path.read_text().splitlines()
    assert len(lines) == 5
    assert '"behavior_logprobs"' in lines[0]


def test_running_normalizer_matches_full_statistics():
    rng = np.random.default_rng(5)
    data = rng.normal(loc=3.0, scale=2.0, size=(300, 4))
    norm = RunningNormalizer(4)
    for chunk in np.array_split(data, 7):
        norm.update(chunk)
    assert norm.count == 300
    np.testing.assert_allclose(norm.mean, data.mean(axis=0), rtol=1e-10)
    np.testing.assert_allclose(norm.var, data.var(axis=0), rtol=1e-10)
    np.testing.assert_allclose(norm.normalize(data).mean(axis=0), 0.0, atol=1e-10)


def test_normalize_obs_on_alternating_stream():
    norm = RunningNormalizer(1)
    stream = np.tile([[0.0], [2.0]], (250, 1))
    for chunk in np.array_split(stream, 10):
        normalize_obs(norm, chunk)
    assert norm.count == 500
    np.testing.assert_allclose(norm.mean, [1.0], rtol=1e-12)
    np.testing.assert_allclose(np.sqrt(norm.var), [1.0], rtol=1e-12)
    np.testing.assert_allclose(normalize_obs(norm, [[0.0], [2.0]], update=False), [[-1.0], [1.0]], rtol=1e-12)


def test_normalizer_identity_before_data_and_copy_is_independent():
    norm = RunningNormalizer(2)
    np.testing.assert_array_equal(norm.normalize([1.0, 2.0]), [1.0, 2.0])
    normalize_obs(norm, np.array([[1.0, 1.0], [3.0, 5.0]]))
    frozen = norm.copy()
    norm.update(np.array([[100.0, 100.0]]))
    assert frozen.count == 2
    assert norm.count == 3


def test_normalizer_rejects_wrong_dimension():
    with pytest.raises(EnvError):
        RunningNormalizer(3).update(np.zeros((2, 4)))


def test_evaluate_policy_is_deterministic():
    spec = get_spec("point_mass")
    policy = make_policy(spec)
    a = evaluate_policy(policy, None, spec, 3, seed=10)
    b = evaluate_policy(policy, None, spec, 3, seed=10)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3,)

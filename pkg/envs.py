"""
Desk-scale continuous-control environments, rollouts and observation normalization.

point_mass: 2-D double integrator driven toward the origin.
pendulum:   torque-controlled pendulum with the cost centred on theta = 0.

Both are deterministic and end episodes by time limit only.
"""
import copy
import hashlib
import json
import logging
from dataclasses import dataclass, replace
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np
from sklearn.preprocessing import StandardScaler

from approximator import GaussianPolicy, policy_logprob, policy_mean, policy_sample

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8

# point_mass physics
PM_DT = 0.1
PM_WALL = 2.0
PM_ACTION_COST = 0.01

# pendulum physics
PEND_G_OVER_L = 10.0
PEND_DT = 0.05
PEND_MAX_SPEED = 8.0


class EnvError(ValueError):
    """Bad environment name, action or state."""


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    max_episode_steps: int
    action_low: Tuple[float, ...]
    action_high: Tuple[float, ...]

    def __post_init__(self):
        if self.obs_dim < 1 or self.act_dim < 1 or self.max_episode_steps < 1:
            raise EnvError(f"invalid dimensions for {self.name}")
        if len(self.action_low) != self.act_dim or len(self.action_high) != self.act_dim:
            raise EnvError(f"{self.name}: action bounds must have {self.act_dim} entries")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise EnvError(f"{self.name}: action_low must be below action_high")


ENV_SPECS: Dict[str, EnvSpec] = {
    "point_mass": EnvSpec("point_mass", obs_dim=4, act_dim=2, max_episode_steps=100,
                          action_low=(-1.0, -1.0), action_high=(1.0, 1.0)),
    "pendulum": EnvSpec("pendulum", obs_dim=3, act_dim=1, max_episode_steps=200,
                        action_low=(-2.0,), action_high=(2.0,)),
}


def get_spec(name: str) -> EnvSpec:
    if name not in ENV_SPECS:
        raise EnvError(f"unknown environment {name!r}; available: {sorted(ENV_SPECS)}")
    return ENV_SPECS[name]


class EnvState(NamedTuple):
    physics: np.ndarray
    t: int


def wrap_angle(theta):
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


def _point_mass_physics(physics: np.ndarray, action: np.ndarray):
    pos, vel = physics[:2], physics[2:]
    vel = vel + PM_DT * action
    pos = pos + PM_DT * vel
    hit = np.abs(pos) > PM_WALL
    pos = np.clip(pos, -PM_WALL, PM_WALL)
    vel = np.where(hit, 0.0, vel)
    reward = -float(np.linalg.norm(pos)) - PM_ACTION_COST * float(action @ action)
    return np.concatenate([pos, vel]), reward


def _pendulum_physics(physics: np.ndarray, action: np.ndarray):
    theta, theta_dot = physics
    u = float(action[0])
    reward = -(wrap_angle(theta) ** 2 + 0.1 * theta_dot ** 2 + 0.001 * u ** 2)
    theta_dot = np.clip(theta_dot + PEND_DT * (-PEND_G_OVER_L * np.sin(theta) + u), -PEND_MAX_SPEED, PEND_MAX_SPEED)
    theta = theta + PEND_DT * theta_dot
    return np.array([theta, theta_dot]), float(reward)


_PHYSICS = {"point_mass": _point_mass_physics, "pendulum": _pendulum_physics}


def observe(spec: EnvSpec, physics: np.ndarray) -> np.ndarray:
    if spec.name == "pendulum":
        theta, theta_dot = physics
        return np.array([np.cos(theta), np.sin(theta), theta_dot])
    return physics.copy()


def initial_physics(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.name == "point_mass":
        return np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])
    return np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])


def step(spec: EnvSpec, env_state: EnvState, action):
    """
    Advance one step. Actions are clipped to the bounds before use.

    Returns (next_state, reward, terminal, truncated). Neither environment has
    terminal states; truncated marks the time limit.
    """
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape != (spec.act_dim,):
        raise EnvError(f"{spec.name}: expected action of shape ({spec.act_dim},), got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise EnvError(f"{spec.name}: non-finite action {action}")
    clipped = np.clip(action, spec.action_low, spec.action_high)
    physics, reward = _PHYSICS[spec.name](env_state.physics, clipped)
    t = env_state.t + 1
    return EnvState(physics, t), reward, False, t >= spec.max_episode_steps


class Env:
    """Stateful wrapper around step() that tracks the running episode."""

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.state: Optional[EnvState] = None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = EnvState(initial_physics(self.spec, rng), 0)
        return observe(self.spec, self.state.physics)

    def step(self, action):
        if self.state is None:
            raise EnvError("step() called before reset()")
        self.state, reward, terminal, truncated = step(self.spec, self.state, action)
        return observe(self.spec, self.state.physics), reward, terminal, truncated


# -- observation normalization -----------------------------------------------

class RunningNormalizer:
    """Running mean/variance of observations on top of StandardScaler.partial_fit."""

    def __init__(self, dim: int):
        self.dim = dim
        self._scaler = StandardScaler()

    @property
    def count(self) -> int:
        seen = getattr(self._scaler, "n_samples_seen_", 0)
        return int(np.max(seen))

    @property
    def mean(self) -> np.ndarray:
        return self._scaler.mean_ if self.count else np.zeros(self.dim)

    @property
    def var(self) -> np.ndarray:
        return self._scaler.var_ if self.count else np.ones(self.dim)

    def update(self, obs):
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if obs.shape[1] != self.dim:
            raise EnvError(f"normalizer expects dim {self.dim}, got {obs.shape[1]}")
        self._scaler.partial_fit(obs)

    def normalize(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        return (obs - self.mean) / np.maximum(np.sqrt(self.var), STD_FLOOR)

    def copy(self) -> "RunningNormalizer":
        return copy.deepcopy(self)

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(), "var": self.var.tolist()}


def normalize_obs(normalizer: RunningNormalizer, obs, update: bool = True) -> np.ndarray:
    """Optionally fold obs into the running statistics, then standardize it."""
    if update:
        normalizer.update(obs)
    return normalizer.normalize(obs)


# -- trajectories -------------------------------------------------------------

_BATCH_FIELDS = ("states", "actions", "rewards", "next_states", "terminals", "truncations",
                 "behavior_logprobs", "policy_ages")


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    states: np.ndarray        # raw observations
    actions: np.ndarray       # pre-clip actions
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    truncations: np.ndarray
    behavior_logprobs: np.ndarray
    policy_ages: np.ndarray

    def __post_init__(self):
        n = len(self.rewards)
        for name in _BATCH_FIELDS:
            if len(getattr(self, name)) != n:
                raise EnvError(f"batch field {name} has length {len(getattr(self, name))}, expected {n}")
        if np.any(self.terminals & self.truncations):
            raise EnvError("a transition cannot be both terminal and truncated")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def dones(self) -> np.ndarray:
        return self.terminals | self.truncations

    def aged(self, increment: int = 1) -> "TrajectoryBatch":
        return replace(self, policy_ages=self.policy_ages + increment)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in _BATCH_FIELDS:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        return h.hexdigest()

    def to_jsonl(self, path):
        with open(path, "w") as f:
            for t in range(len(self)):
                record = {name: np.asarray(getattr(self, name)[t]).tolist() for name in _BATCH_FIELDS}
                f.write(json.dumps(record, sort_keys=True) + "\n")


class Sampler:
    """
    Collects fixed-size batches from one long-lived environment.

    Episodes carry over batch boundaries. The policy sees observations through
    the normalizer, which is read but never updated here.
    """

    def __init__(self, spec: EnvSpec, rng: np.random.Generator):
        self.spec = spec
        self.env = Env(spec)
        self.rng = rng
        self.obs = self.env.reset(rng)

    def collect(self, policy: GaussianPolicy, n_steps: int,
                normalizer: Optional[RunningNormalizer] = None) -> TrajectoryBatch:
        if n_steps < 1:
            raise EnvError(f"n_steps must be >= 1, got {n_steps}")
        spec = self.spec
        states = np.zeros((n_steps, spec.obs_dim))
        next_states = np.zeros((n_steps, spec.obs_dim))
        actions = np.zeros((n_steps, spec.act_dim))
        rewards = np.zeros(n_steps)
        terminals = np.zeros(n_steps, dtype=bool)
        truncations = np.zeros(n_steps, dtype=bool)

        for t in range(n_steps):
            seen = self.obs if normalizer is None else normalizer.normalize(self.obs)
            action = policy_sample(policy, seen, self.rng)
            next_obs, reward, terminal, truncated = self.env.step(action)
            states[t], actions[t], rewards[t] = self.obs, action, reward
            next_states[t], terminals[t], truncations[t] = next_obs, terminal, truncated and not terminal
            self.obs = self.env.reset(self.rng) if (terminal or truncated) else next_obs

        seen_states = states if normalizer is None else normalizer.normalize(states)
        behavior, _ = policy_logprob(policy, seen_states, actions, need_grad=False)
        return TrajectoryBatch(states, actions, rewards, next_states, terminals, truncations,
                               behavior, np.zeros(n_steps, dtype=np.int64))


def rollout(policy: GaussianPolicy, env, n_steps: int, rng_seed: int,
            normalizer: Optional[RunningNormalizer] = None) -> TrajectoryBatch:
    """One-shot collection of n_steps transitions from a fresh environment."""
    spec = env if isinstance(env, EnvSpec) else get_spec(env)
    return Sampler(spec, np.random.default_rng(rng_seed)).collect(policy, n_steps, normalizer)


def evaluate_policy(policy: GaussianPolicy, normalizer: Optional[RunningNormalizer], spec: EnvSpec,
                    episodes: int, seed: int) -> np.ndarray:
    """Undiscounted returns of mean-action episodes; normalizer statistics stay frozen."""
    rng = np.random.default_rng(seed)
    env = Env(spec)
    returns = np.zeros(episodes)
    for ep in range(episodes):
        obs = env.reset(rng)
        done = False
        while not done:
            seen = obs if normalizer is None else normalizer.normalize(obs)
            obs, reward, terminal, truncated = env.step(policy_mean(policy, seen))
            returns[ep] += reward
            done = terminal or truncated
    return returns

"""
Advantage and value-target estimation.

gae()            on-policy generalized advantage estimation
vtrace_targets() the off-policy variant with truncated importance ratios
standardize_starting_point() per-minibatch standardization of ratio * advantage

Recursions run backward over the batch. Products of ratios and the lambda
discount are cut at every terminal or truncated step and at the end of the
batch; value bootstrapping applies everywhere except terminal steps.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from envs import TrajectoryBatch

logger = logging.getLogger(__name__)

DEGENERATE_STD = 1e-12


class EstimationError(ValueError):
    """Mismatched lengths or non-finite importance ratios."""


@dataclass(frozen=True)
class EstimatorConfig:
    gamma: float = 0.995
    lam: float = 0.97
    c_bar: float = 1.0

    def __post_init__(self):
        # gamma = 1 is accepted for finite-horizon checks
        if not 0.0 <= self.gamma <= 1.0:
            raise EstimationError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise EstimationError(f"lambda must be in [0, 1], got {self.lam}")
        if self.c_bar <= 0:
            raise EstimationError(f"c_bar must be positive, got {self.c_bar}")


@dataclass(frozen=True, eq=False)
class AdvantageBatch:
    advantages: np.ndarray
    targets: np.ndarray
    starting_points: np.ndarray  # (pi_k / behavior) * advantage

    def __len__(self):
        return len(self.advantages)


class StandardizedStart(NamedTuple):
    values: np.ndarray
    degenerate: bool


def _check_lengths(batch: TrajectoryBatch, *arrays):
    n = len(batch)
    for arr in arrays:
        if len(arr) != n:
            raise EstimationError(f"length mismatch: batch has {n} transitions, got array of {len(arr)}")


def td_residuals(batch: TrajectoryBatch, values, next_values, gamma: float) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    _check_lengths(batch, values, next_values)
    bootstrap = np.where(batch.terminals, 0.0, next_values)
    return batch.rewards + gamma * bootstrap - values


def truncated_ratios(current_logprobs, behavior_logprobs, c_bar: float) -> np.ndarray:
    """c_t = min(c_bar, pi_k / behavior)."""
    ratios = np.exp(np.asarray(current_logprobs, dtype=np.float64) - np.asarray(behavior_logprobs, dtype=np.float64))
    if not np.all(np.isfinite(ratios)):
        raise EstimationError(f"{int(np.sum(~np.isfinite(ratios)))} non-finite importance ratios")
    return np.minimum(c_bar, ratios)


def _backward(deltas: np.ndarray, dones: np.ndarray, coef: float, traces=None) -> np.ndarray:
    adv = np.zeros_like(deltas)
    running = 0.0
    for t in reversed(range(len(deltas))):
        if dones[t] or t == len(deltas) - 1:
            running = deltas[t]
        elif traces is None:
            running = deltas[t] + coef * running
        else:
            running = deltas[t] + coef * traces[t + 1] * running
        adv[t] = running
    return adv


def gae(batch: TrajectoryBatch, values, next_values, config: EstimatorConfig) -> AdvantageBatch:
    """A_t = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}; target = A_t + V(s_t)."""
    deltas = td_residuals(batch, values, next_values, config.gamma)
    adv = _backward(deltas, batch.dones, config.gamma * config.lam)
    return AdvantageBatch(advantages=adv, targets=adv + np.asarray(values, dtype=np.float64),
                          starting_points=adv.copy())


def vtrace_targets(batch: TrajectoryBatch, values, next_values, current_logprobs,
                   config: EstimatorConfig) -> AdvantageBatch:
    """
    Lambda-weighted V-trace advantages and value targets for data from an older policy.

    A_t = delta_t + gamma * lambda * (1 - done_t) * c_{t+1} * A_{t+1}
    target_t = V(s_t) + c_t * A_t

    With every ratio equal to one this is exactly gae().
    """
    current_logprobs = np.asarray(current_logprobs, dtype=np.float64)
    _check_lengths(batch, current_logprobs)
    traces = truncated_ratios(current_logprobs, batch.behavior_logprobs, config.c_bar)
    deltas = td_residuals(batch, values, next_values, config.gamma)
    adv = _backward(deltas, batch.dones, config.gamma * config.lam, traces)
    centers = np.exp(current_logprobs - batch.behavior_logprobs)
    return AdvantageBatch(advantages=adv, targets=np.asarray(values, dtype=np.float64) + traces * adv,
                          starting_points=centers * adv)


def _explicit(deltas, dones, coef, traces):
    T = len(deltas)
    adv = np.zeros(T)
    for t in range(T):
        weight = 1.0
        for j in range(t, T):
            if j > t:
                weight *= coef * traces[j]
            adv[t] += weight * deltas[j]
            if dones[j]:
                break
    return adv


def gae_explicit(batch: TrajectoryBatch, values, next_values, config: EstimatorConfig) -> np.ndarray:
    """Reference O(T^2) sum of (gamma lambda)^j delta_{t+j} within each episode."""
    deltas = td_residuals(batch, values, next_values, config.gamma)
    return _explicit(deltas, batch.dones, config.gamma * config.lam, np.ones(len(deltas)))


def vtrace_explicit(batch: TrajectoryBatch, values, next_values, current_logprobs,
                    config: EstimatorConfig) -> np.ndarray:
    """Reference O(T^2) sum of (gamma lambda)^j (c_{t+1} ... c_{t+j}) delta_{t+j}."""
    traces = truncated_ratios(current_logprobs, batch.behavior_logprobs, config.c_bar)
    deltas = td_residuals(batch, values, next_values, config.gamma)
    return _explicit(deltas, batch.dones, config.gamma * config.lam, traces)


def standardize_starting_point(advantages, centers=None) -> StandardizedStart:
    """
    Standardize centers * advantages to mean 0 and population std 1.

    centers are pi_k / pi_{k-i} per sample (all ones on-policy). A constant input
    comes back centered only, with the degenerate flag set.
    """
    x = np.asarray(advantages, dtype=np.float64)
    if x.size == 0:
        raise EstimationError("cannot standardize an empty minibatch")
    if centers is not None:
        x = np.asarray(centers, dtype=np.float64) * x
    centered = x - x.mean()
    std = centered.std()
    if std < DEGENERATE_STD:
        return StandardizedStart(centered, True)
    return StandardizedStart(centered / std, False)

"""
Clipped policy objectives, the sample-based TV estimate and the adaptive learning rate.

The generalized objective clips the ratio pi / pi_{k-i} to a band of half-width
epsilon around its starting value pi_k / pi_{k-i}. For data from the current
policy the center is 1 and the standard clipped objective falls out.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import torch

from advantage_estimation import standardize_starting_point
from approximator import GaussianPolicy, as_tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClipConfig:
    epsilon: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"clip epsilon must be in (0, 1), got {self.epsilon}")


@dataclass(frozen=True, eq=False)
class Minibatch:
    """Samples for one gradient step; states are already normalized for the current policy."""
    states: np.ndarray
    actions: np.ndarray
    behavior_logprobs: np.ndarray
    centers: np.ndarray      # pi_k / pi_{k-i}
    advantages: np.ndarray
    weights: np.ndarray      # nu_i * M
    valid: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.advantages)


class LossResult(NamedTuple):
    objective: float
    surrogate: torch.Tensor  # differentiable objective, ascended by the trainer
    clip_fraction: float
    rejected: int
    degenerate: bool


def generalized_clip(ratio_pi, ratio_pik, epsilon):
    """clip(pi/pi_{k-i}, pi_k/pi_{k-i} - eps, pi_k/pi_{k-i} + eps)."""
    ratio_pik = np.asarray(ratio_pik, dtype=np.float64)
    if np.any(~np.isfinite(ratio_pik)) or np.any(ratio_pik <= 0):
        raise ValueError("clip center must be finite and positive")
    return np.clip(ratio_pi, ratio_pik - epsilon, ratio_pik + epsilon)


def clipped_objective(ratio, center, advantage, epsilon):
    """
    Per-sample min(ratio * A, clip(ratio, center +- eps) * A) and its derivative in ratio.

    The derivative is A where the unclipped term is selected and 0 where the
    clipped term is strictly smaller.
    """
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    unclipped = ratio * advantage
    clipped = generalized_clip(ratio, center, epsilon) * advantage
    use_unclipped = unclipped <= clipped
    value = np.where(use_unclipped, unclipped, clipped)
    return value, np.where(use_unclipped, advantage, 0.0)


def ppo_loss(ratio, advantage, clip: ClipConfig):
    """Standard clipped objective: center fixed at 1."""
    return clipped_objective(ratio, np.ones_like(np.asarray(ratio, dtype=np.float64)), advantage, clip.epsilon)


def _surrogate(policy: GaussianPolicy, states, actions, behavior_logprobs, centers, advantages, weights,
               epsilon: float):
    """Differentiable weighted mean of min(ratio * A, clip(ratio, center +- eps) * A), and the ratios."""
    logp = policy(as_tensor(states), as_tensor(actions))
    ratio = torch.exp(logp - as_tensor(behavior_logprobs))
    center, adv = as_tensor(centers), as_tensor(advantages)
    clipped = torch.minimum(torch.maximum(ratio, center - epsilon), center + epsilon)
    value = torch.minimum(ratio * adv, clipped * adv)
    surrogate = torch.sum(as_tensor(weights) * value) / len(adv)
    return surrogate, ratio.detach().numpy()


def geppo_loss(policy: GaussianPolicy, minibatch: Minibatch, clip: ClipConfig) -> LossResult:
    """
    Weighted empirical mean of the generalized clipped objective over a minibatch.

    Advantages enter through their standardized starting points: center * A is
    standardized to mean 0 and std 1, then divided back by the center, so each
    sample starts the update at the standardized value. Samples with a
    non-finite center are rejected.
    """
    valid = np.isfinite(minibatch.centers) & (minibatch.centers > 0)
    if minibatch.valid is not None:
        valid &= minibatch.valid
    rejected = int(np.sum(~valid))
    if rejected:
        logger.debug(f"rejecting {rejected} samples with vanishing behavior density")
    if not valid.any():
        raise ValueError("every sample in the minibatch was rejected")

    centers = minibatch.centers[valid]
    start = standardize_starting_point(minibatch.advantages[valid], centers)
    surrogate, ratio = _surrogate(policy, minibatch.states[valid], minibatch.actions[valid],
                                  minibatch.behavior_logprobs[valid], centers, start.values / centers,
                                  minibatch.weights[valid], clip.epsilon)
    clip_fraction = float(np.mean(np.abs(ratio - centers) > clip.epsilon))
    return LossResult(float(surrogate.detach()), surrogate, clip_fraction, rejected, start.degenerate)


def ppo_objective(policy: GaussianPolicy, states, actions, old_logprobs, advantages,
                  clip: ClipConfig) -> LossResult:
    """The on-policy clipped objective with standardized advantages and unit weights."""
    ones = np.ones(len(np.asarray(advantages)))
    start = standardize_starting_point(advantages, ones)
    surrogate, ratio = _surrogate(policy, states, actions, np.asarray(old_logprobs, dtype=np.float64), ones,
                                  start.values / ones, ones, clip.epsilon)
    clip_fraction = float(np.mean(np.abs(ratio - 1.0) > clip.epsilon))
    return LossResult(float(surrogate.detach()), surrogate, clip_fraction, 0, start.degenerate)


def tv_from_logprobs(weights, candidate_logprobs, current_logprobs, behavior_logprobs) -> float:
    """Half the weighted mean of |pi/pi_{k-i} - pi_k/pi_{k-i}|."""
    weights = np.asarray(weights, dtype=np.float64)
    cand = np.exp(np.asarray(candidate_logprobs) - np.asarray(behavior_logprobs))
    cur = np.exp(np.asarray(current_logprobs) - np.asarray(behavior_logprobs))
    ok = np.isfinite(cand) & np.isfinite(cur)
    return float(0.5 * np.sum(weights[ok] * np.abs(cand[ok] - cur[ok])) / np.sum(weights[ok]))


def tv_estimate(assembled, candidate_logprobs) -> float:
    """Sample-based expected TV between a candidate policy and pi_k over an assembled set."""
    return tv_from_logprobs(assembled.weights, candidate_logprobs, assembled.current_logprobs,
                            assembled.behavior_logprobs)


@dataclass(frozen=True)
class LrController:
    eta: float
    epsilon: float
    alpha: float = 0.03
    beta: float = 0.5

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"learning rate must be positive, got {self.eta}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")

    @property
    def target(self) -> float:
        return self.epsilon / 2.0


def lr_update(ctrl: LrController, tv_hat: float):
    """Shrink above the TV target, grow below beta * target, hold in between. Returns (ctrl, branch)."""
    if tv_hat < 0:
        raise ValueError(f"tv_hat must be nonnegative, got {tv_hat}")
    if tv_hat > ctrl.target:
        return LrController(ctrl.eta / (1.0 + ctrl.alpha), ctrl.epsilon, ctrl.alpha, ctrl.beta), "shrink"
    if tv_hat < ctrl.beta * ctrl.target:
        return LrController(ctrl.eta * (1.0 + ctrl.alpha), ctrl.epsilon, ctrl.alpha, ctrl.beta), "grow"
    return ctrl, "hold"


@dataclass(frozen=True)
class UpdateReport:
    iteration: int
    tv_hat: float
    eta_before: float
    eta_after: float
    branch: str
    clip_frac: float
    loss: float
    value_loss: float
    rejected: int = 0

    def __post_init__(self):
        if self.tv_hat < 0:
            raise ValueError(f"tv_hat must be nonnegative, got {self.tv_hat}")

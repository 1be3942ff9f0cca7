"""
Replay window over the last M policies and their batches.

The window keeps (snapshot, batch) pairs newest first. assemble() turns it
into one flat training set where every sample carries its source age, the
behavior and current log-probabilities and a loss weight nu_i * M, so a
uniform pass over the set is an expectation over i ~ nu.
"""
import copy
import json
import logging
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from advantage_estimation import AdvantageBatch
from approximator import GaussianPolicy, params_checksum
from envs import RunningNormalizer, TrajectoryBatch
from policy_weights import PolicyWeights

logger = logging.getLogger(__name__)

LogprobFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class ReplayBufferError(ValueError):
    """Wrong batch size, empty window or weights that do not fit the window."""


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    iteration: int
    params: GaussianPolicy
    normalizer: RunningNormalizer
    checksum: str

    @classmethod
    def capture(cls, iteration: int, params: GaussianPolicy,
                normalizer: RunningNormalizer) -> "PolicySnapshot":
        """Deep copy of the policy; the trainer updates its own module in place."""
        frozen = copy.deepcopy(params)
        return cls(iteration, frozen, normalizer.copy(), params_checksum(frozen))

    def intact(self) -> bool:
        return params_checksum(self.params) == self.checksum


@dataclass(frozen=True)
class Segment:
    start: int
    stop: int
    age: int


@dataclass(frozen=True, eq=False)
class AssembledSet:
    states: np.ndarray
    actions: np.ndarray
    behavior_logprobs: np.ndarray
    current_logprobs: np.ndarray
    ages: np.ndarray
    weights: np.ndarray  # nu_i * M per sample
    valid: np.ndarray
    segments: Tuple[Segment, ...]
    nu: PolicyWeights
    advantages: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.weights)

    @property
    def centers(self) -> np.ndarray:
        """pi_k / pi_{k-i} per sample."""
        return np.exp(self.current_logprobs - self.behavior_logprobs)

    @property
    def rejected(self) -> int:
        return int(np.sum(~self.valid))

    def with_estimates(self, estimates: List[AdvantageBatch]) -> "AssembledSet":
        if len(estimates) != len(self.segments):
            raise ReplayBufferError(f"{len(estimates)} estimates for {len(self.segments)} segments")
        return replace(self,
                       advantages=np.concatenate([e.advantages for e in estimates]),
                       targets=np.concatenate([e.targets for e in estimates]))

    def weighted_mean(self, values) -> float:
        values = np.asarray(values, dtype=np.float64)
        return float(np.sum(self.weights * values) / len(self))


class ReplayWindow:
    """Ring of at most M (snapshot, batch) pairs, newest first; every batch has exactly n transitions."""

    def __init__(self, M: int, n: int):
        if M < 1 or n < 1:
            raise ReplayBufferError(f"window needs M >= 1 and n >= 1, got M={M}, n={n}")
        self.M = M
        self.n = n
        self._entries = deque()

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    @property
    def ages(self) -> List[int]:
        return [int(batch.policy_ages[0]) for _, batch in self._entries]

    @property
    def snapshots(self) -> List[PolicySnapshot]:
        return [snap for snap, _ in self._entries]

    def push(self, snapshot: PolicySnapshot, batch: TrajectoryBatch) -> "ReplayWindow":
        if len(batch) != self.n:
            raise ReplayBufferError(f"expected a batch of {self.n} transitions, got {len(batch)}")
        fresh = (snapshot, replace(batch, policy_ages=np.zeros(len(batch), dtype=np.int64)))
        kept = [(snap, old.aged()) for snap, old in self._entries][: self.M - 1]
        if len(self._entries) == self.M:
            logger.debug(f"evicting snapshot from iteration {self._entries[-1][0].iteration}")
        self._entries.clear()
        self._entries.extend([fresh, *kept])
        return self

    def dump_jsonl(self, path):
        with open(path, "w") as f:
            for snap, batch in self._entries:
                f.write(json.dumps({
                    "iteration": snap.iteration,
                    "age": int(batch.policy_ages[0]),
                    "checksum": snap.checksum,
                    "digest": batch.digest(),
                    "transitions": len(batch),
                }) + "\n")


def assemble(window: ReplayWindow, nu: PolicyWeights, current_logprob: LogprobFn) -> AssembledSet:
    """
    Flatten the window into a weighted training set under the current policy.

    While the window is still filling, nu is cut to the available policies and
    renormalized. current_logprob maps raw (states, actions) to log pi_k.
    """
    if len(window) == 0:
        raise ReplayBufferError("cannot assemble an empty replay window")
    if nu.M < len(window):
        raise ReplayBufferError(f"weights cover {nu.M} policies but the window holds {len(window)}")
    if nu.M > len(window):
        nu = nu.truncated(len(window))
    M = nu.M

    parts, segments, start = [], [], 0
    for age, (snap, batch) in enumerate(window):
        current = np.asarray(current_logprob(batch.states, batch.actions), dtype=np.float64)
        parts.append((batch, current, np.full(len(batch), nu.nu[age] * M)))
        segments.append(Segment(start, start + len(batch), age))
        start += len(batch)

    current_lp = np.concatenate([p[1] for p in parts])
    behavior_lp = np.concatenate([p[0].behavior_logprobs for p in parts])
    with np.errstate(over="ignore", invalid="ignore"):
        valid = np.isfinite(np.exp(current_lp - behavior_lp))
    if not valid.all():
        logger.warning(f"{int(np.sum(~valid))} samples with non-finite importance ratios will be rejected")

    return AssembledSet(
        states=np.concatenate([p[0].states for p in parts]),
        actions=np.concatenate([p[0].actions for p in parts]),
        behavior_logprobs=behavior_lp,
        current_logprobs=current_lp,
        ages=np.concatenate([p[0].policy_ages for p in parts]),
        weights=np.concatenate([p[2] for p in parts]),
        valid=valid,
        segments=tuple(segments),
        nu=nu,
    )


def segment_batch(window: ReplayWindow, segment: Segment) -> TrajectoryBatch:
    return list(window)[segment.age][1]

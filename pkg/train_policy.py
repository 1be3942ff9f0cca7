"""
Training loop for PPO, PPO with an adaptive learning rate, and GePPO.

Each iteration: collect a batch with the current policy, push it into the
replay window, estimate advantages per source batch, run epochs of shuffled
minibatch ascent on the clipped objective while regressing the value network
to its targets, then adjust the learning rate from the TV estimate.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from tqdm import tqdm

from advantage_estimation import EstimatorConfig, gae, vtrace_targets
from approximator import (AdamState, GaussianPolicy, Mlp, NonFiniteError, adam_step, init_policy, init_value,
                          mlp_forward, policy_logprob, save_checkpoint, value_loss)
from config import Setup, TrainerConfig, resolve_setup
from envs import RunningNormalizer, Sampler, evaluate_policy, get_spec
from geppo import (ClipConfig, LrController, Minibatch, UpdateReport, geppo_loss, lr_update,
                   ppo_objective, tv_estimate, tv_from_logprobs)
from replay_buffer import AssembledSet, PolicySnapshot, ReplayWindow, assemble

logger = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 10_000


class TrainingDiverged(RuntimeError):
    """Loss or parameters became non-finite."""


@dataclass
class TrainResult:
    policy: GaussianPolicy
    value: Mlp
    normalizer: RunningNormalizer
    setup: Setup
    metrics: List[dict] = field(default_factory=list)
    reports: List[UpdateReport] = field(default_factory=list)


def _values(value: Mlp, normalizer: RunningNormalizer, states: np.ndarray) -> np.ndarray:
    return mlp_forward(value, normalizer.normalize(states))[:, 0]


def estimate(assembled: AssembledSet, window: ReplayWindow, value: Mlp,
             normalizer: RunningNormalizer, est: EstimatorConfig, off_policy: bool) -> AssembledSet:
    """Advantages and value targets per source batch; V-trace when data may be off-policy."""
    estimates = []
    for segment, (_, batch) in zip(assembled.segments, window):
        v = _values(value, normalizer, batch.states)
        v_next = _values(value, normalizer, batch.next_states)
        if off_policy:
            current = assembled.current_logprobs[segment.start:segment.stop]
            estimates.append(vtrace_targets(batch, v, v_next, current, est))
        else:
            estimates.append(gae(batch, v, v_next, est))
    return assembled.with_estimates(estimates)


def _check_finite(what: str, *values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise TrainingDiverged(f"non-finite {what}")


class Trainer:
    """Holds the mutable training state for one seed."""

    def __init__(self, config: TrainerConfig):
        self.config = config
        self.setup = resolve_setup(config)
        self.spec = get_spec(config.env)
        init_seq, sample_seq, shuffle_seq = np.random.SeedSequence(config.seed).spawn(3)
        init_rng = np.random.default_rng(init_seq)
        self.shuffle_rng = np.random.default_rng(shuffle_seq)
        self.sampler = Sampler(self.spec, np.random.default_rng(sample_seq))

        self.policy = init_policy(self.spec.obs_dim, self.spec.act_dim, config.hidden_sizes, init_rng,
                                  self.spec.action_low, self.spec.action_high, config.init_std_multiple)
        self.value = init_value(self.spec.obs_dim, config.hidden_sizes, init_rng)
        self.normalizer = RunningNormalizer(self.spec.obs_dim)
        self.policy_adam = AdamState.for_params(self.policy, config.eta0)
        self.value_adam = AdamState.for_params(self.value, config.value_lr)
        self.ctrl = LrController(config.eta0, self.setup.epsilon, config.alpha, config.beta)
        self.clip = ClipConfig(self.setup.epsilon)
        self.est = EstimatorConfig(config.gamma, config.lam, config.c_bar)
        self.window = ReplayWindow(self.setup.weights.M, self.setup.batch_size)
        self.steps = 0

    def current_logprob(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return policy_logprob(self.policy, self.normalizer.normalize(states), actions, need_grad=False)[0]

    def update(self, iteration: int) -> UpdateReport:
        config = self.config
        assembled = assemble(self.window, self.setup.weights, self.current_logprob)
        off_policy = config.algorithm == "geppo"
        assembled = estimate(assembled, self.window, self.value, self.normalizer, self.est, off_policy)
        _check_finite("advantage estimates", assembled.advantages, assembled.targets)

        states = self.normalizer.normalize(assembled.states)
        centers = assembled.centers
        objectives, value_losses, clip_fracs, minibatch_tv = [], [], [], []
        rejected = 0
        degenerate = 0
        self.policy_adam.eta = self.ctrl.eta
        for epoch in range(config.epochs):
            order = self.shuffle_rng.permutation(len(assembled))
            for idx in np.array_split(order, config.minibatches):
                if idx.size == 0:
                    continue
                mb = Minibatch(states[idx], assembled.actions[idx], assembled.behavior_logprobs[idx],
                               centers[idx], assembled.advantages[idx], assembled.weights[idx],
                               assembled.valid[idx])
                try:
                    if off_policy:
                        result = geppo_loss(self.policy, mb, self.clip)
                    else:
                        result = ppo_objective(self.policy, mb.states, mb.actions, mb.behavior_logprobs,
                                               mb.advantages, self.clip)
                    _check_finite("policy objective", result.objective)
                    adam_step(self.policy_adam, self.policy, -result.surrogate)
                    v_loss_t = value_loss(self.value, states[idx], assembled.targets[idx])
                    v_loss = float(v_loss_t.detach())
                    _check_finite("value loss", v_loss)
                    adam_step(self.value_adam, self.value, v_loss_t)
                except NonFiniteError as e:
                    raise TrainingDiverged(f"iteration {iteration}: {e}") from e

                objectives.append(result.objective)
                value_losses.append(v_loss)
                clip_fracs.append(result.clip_fraction)
                rejected += result.rejected
                degenerate += int(result.degenerate)
                if config.tv_mode == "minibatch" and epoch == config.epochs - 1:
                    cand, _ = policy_logprob(self.policy, mb.states, mb.actions, need_grad=False)
                    minibatch_tv.append(tv_from_logprobs(mb.weights, cand, assembled.current_logprobs[idx],
                                                         mb.behavior_logprobs))
        if degenerate:
            logger.warning(f"iteration {iteration}: {degenerate} minibatches had constant starting points")

        if config.tv_mode == "minibatch":
            tv_hat = float(np.mean(minibatch_tv))
        else:
            candidate, _ = policy_logprob(self.policy, states, assembled.actions, need_grad=False)
            tv_hat = tv_estimate(assembled, candidate)
        _check_finite("TV estimate", tv_hat)

        eta_before = self.ctrl.eta
        branch = "fixed"
        if self.setup.adaptive:
            self.ctrl, branch = lr_update(self.ctrl, tv_hat)
        return UpdateReport(iteration=iteration, tv_hat=tv_hat, eta_before=eta_before, eta_after=self.ctrl.eta,
                            branch=branch, clip_frac=float(np.mean(clip_fracs)), loss=-float(np.mean(objectives)),
                            value_loss=float(np.mean(value_losses)), rejected=rejected // config.epochs)

    def iterate(self, iteration: int):
        n = self.setup.batch_size
        batch = self.sampler.collect(self.policy, n, self.normalizer)
        self.steps += n
        self.window.push(PolicySnapshot.capture(iteration, self.policy, self.normalizer), batch)
        report = self.update(iteration)
        # order: policy update, then TV estimate (inside update), then normalizer statistics
        self.normalizer.update(batch.states)

        eval_return = None
        if (iteration + 1) % self.config.eval_every == 0:
            returns = evaluate_policy(self.policy, self.normalizer, self.spec, self.config.eval_episodes,
                                      self.config.seed + EVAL_SEED_OFFSET)
            eval_return = float(np.mean(returns))
        record = {
            "iter": iteration,
            "steps": self.steps,
            "eval_return": eval_return,
            "tv_hat": report.tv_hat,
            "eta": report.eta_after,
            "clip_frac": report.clip_frac,
            "loss": report.loss,
            "value_loss": report.value_loss,
        }
        return record, report


def train(config: TrainerConfig, on_record: Optional[Callable[[dict], None]] = None,
          checkpoint_path=None) -> TrainResult:
    """Run total_steps // batch_size iterations; deterministic given config.seed."""
    trainer = Trainer(config)
    setup = trainer.setup
    iterations = config.total_steps // setup.batch_size
    logger.info(f"training {config.algorithm} on {config.env}: {iterations} iterations of {setup.batch_size} "
                f"steps, M={setup.weights.M}, eps={setup.epsilon:.4g}")

    result = TrainResult(trainer.policy, trainer.value, trainer.normalizer, setup)
    for k in tqdm(range(iterations), desc=f"{config.algorithm} seed {config.seed}", disable=not config.progress):
        record, report = trainer.iterate(k)
        result.metrics.append(record)
        result.reports.append(report)
        if on_record is not None:
            on_record(record)
        logger.debug(f"iter {k}: return={record['eval_return']} tv={report.tv_hat:.4f} "
                     f"eta={report.eta_after:.3e} ({report.branch}) clip={report.clip_frac:.3f}")

    for snap in trainer.window.snapshots:
        if not snap.intact():
            raise TrainingDiverged(f"snapshot from iteration {snap.iteration} was modified")
    result.policy, result.value, result.normalizer = trainer.policy, trainer.value, trainer.normalizer
    if checkpoint_path is not None and config.checkpoint:
        save_checkpoint(checkpoint_path, trainer.policy, trainer.value, trainer.normalizer.state_dict(), iterations)
    return result

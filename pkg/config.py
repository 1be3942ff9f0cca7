"""
Experiment configuration.

A run is described by one JSON document; every field it omits takes the
default below. Environment-level settings (output directory, log level) come
from the process environment or a .env file.
"""
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import List, NamedTuple, Tuple

from dotenv import load_dotenv

from envs import ENV_SPECS
from policy_weights import PROGRAMS, PolicyWeights, epsilon_mapping, resolve_weights

load_dotenv()

logger = logging.getLogger(__name__)

OUTPUT_DIR = os.getenv("GEPPO_OUTPUT_DIR", "runs")
LOG_LEVEL = os.getenv("GEPPO_LOG_LEVEL", "INFO")

ALGORITHMS = ("ppo", "geppo", "ppo_adapt")
TV_MODES = ("post_update", "minibatch")
_ALIASES = {"lambda": "lam"}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class TrainerConfig:
    algorithm: str = "geppo"
    env: str = "point_mass"
    seed: int = 0
    total_steps: int = 1_000_000
    n: int = 1024
    N: int = 2048
    M_bar: int = 8
    eps_ppo: float = 0.2
    gamma: float = 0.995
    lam: float = 0.97
    c_bar: float = 1.0
    alpha: float = 0.03
    beta: float = 0.5
    eta0: float = 3e-4
    value_lr: float = 3e-4
    minibatches: int = 32
    epochs: int = 10
    weight_program: str = "essopt"
    hidden_sizes: Tuple[int, ...] = (64, 64)
    init_std_multiple: float = 1.0
    eval_episodes: int = 10
    eval_every: int = 1
    tv_mode: str = "post_update"
    progress: bool = True
    checkpoint: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.env not in ENV_SPECS:
            raise ConfigError(f"env must be one of {sorted(ENV_SPECS)}, got {self.env!r}")
        if self.weight_program not in PROGRAMS:
            raise ConfigError(f"weight_program must be one of {PROGRAMS}, got {self.weight_program!r}")
        if self.tv_mode not in TV_MODES:
            raise ConfigError(f"tv_mode must be one of {TV_MODES}, got {self.tv_mode!r}")
        if self.n < 1 or self.N < 1 or self.N % self.n:
            raise ConfigError(f"N must be a positive multiple of n, got N={self.N}, n={self.n}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be nonnegative, got {self.total_steps}")
        if self.minibatches < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ConfigError("minibatches, epochs and eval_every must be >= 1")
        if not 0 < self.eps_ppo < 1:
            raise ConfigError(f"eps_ppo must be in (0, 1), got {self.eps_ppo}")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden_sizes}")

    @property
    def B(self) -> int:
        return self.N // self.n

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["hidden_sizes"] = list(self.hidden_sizes)
        return doc


class Setup(NamedTuple):
    batch_size: int
    weights: PolicyWeights
    epsilon: float
    adaptive: bool


def config_from_dict(doc: dict) -> Tuple[TrainerConfig, dict]:
    """Build a config from a (possibly partial) document; returns it with the overridden fields."""
    known = {f.name for f in fields(TrainerConfig)}
    overrides = {}
    for key, value in doc.items():
        name = _ALIASES.get(key, key)
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        overrides[name] = value
    try:
        config = TrainerConfig(**overrides)
    except TypeError as e:
        raise ConfigError(f"bad config value: {e}") from e
    return config, config_overrides(config)


def config_overrides(config: TrainerConfig) -> dict:
    """Fields that differ from the defaults."""
    default = TrainerConfig().to_dict()
    return {k: v for k, v in config.to_dict().items() if default[k] != v}


def load_config(path) -> Tuple[TrainerConfig, dict]:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    config, overrides = config_from_dict(doc)
    logger.info(f"loaded config {path}: {overrides}")
    return config, overrides


def config_hash(config: TrainerConfig) -> str:
    doc = config.to_dict()
    doc.pop("progress")
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def resolve_setup(config: TrainerConfig) -> Setup:
    """Batch size, policy weights, clip parameter and learning-rate mode for an algorithm."""
    if config.algorithm in ("ppo", "ppo_adapt"):
        return Setup(config.N, PolicyWeights([1.0]), config.eps_ppo, config.algorithm == "ppo_adapt")
    weights = resolve_weights(config.weight_program, config.B, config.M_bar)
    return Setup(config.n, weights, epsilon_mapping(weights, config.eps_ppo), True)


def with_overrides(config: TrainerConfig, **changes) -> TrainerConfig:
    doc = config.to_dict()
    doc.update(changes)
    return TrainerConfig(**doc)


def describe(config: TrainerConfig) -> List[str]:
    setup = resolve_setup(config)
    return [
        f"algorithm={config.algorithm} env={config.env} seed={config.seed}",
        f"batch={setup.batch_size} M={setup.weights.M} eps={setup.epsilon:.4g} adaptive={setup.adaptive}",
        f"nu={[round(float(v), 6) for v in setup.weights.nu]}",
    ]

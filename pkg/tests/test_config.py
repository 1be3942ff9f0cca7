import json
from pathlib import Path

import numpy as np
import pytest

from config import (ConfigError, TrainerConfig, config_from_dict, config_hash, describe, load_config, resolve_setup,
                    with_overrides)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def test_defaults():
    config = TrainerConfig()
    assert config.algorithm == "geppo"
    assert config.B == 2
    assert config.eps_ppo == 0.2
    assert config.lam == 0.97
    assert config.hidden_sizes == (64, 64)


def test_partial_document_and_overrides():
    config, overrides = config_from_dict({"algorithm": "ppo", "lambda": 0.9, "hidden_sizes": [32]})
    assert config.algorithm == "ppo"
    assert config.lam == 0.9
    assert config.hidden_sizes == (32,)
    assert overrides == {"algorithm": "ppo", "lam": 0.9, "hidden_sizes": [32]}


@pytest.mark.parametrize("doc", [
    {"learning_rate": 1.0},
    {"algorithm": "trpo"},
    {"n": 1000, "N": 2048},
    {"eps_ppo": 1.5},
    {"tv_mode": "sometimes"},
    {"epochs": 0},
    {"env": "walker"},
    {"weight_program": "best"},
])
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_resolve_setup_per_algorithm():
    ppo = resolve_setup(TrainerConfig(algorithm="ppo"))
    assert ppo.batch_size == 2048
    assert ppo.weights.M == 1
    assert ppo.epsilon == 0.2
    assert not ppo.adaptive

    adapt = resolve_setup(TrainerConfig(algorithm="ppo_adapt"))
    assert adapt.batch_size == 2048 and adapt.adaptive

    geppo = resolve_setup(TrainerConfig(algorithm="geppo"))
    assert geppo.batch_size == 1024
    np.testing.assert_allclose(geppo.weights.nu, [0.4, 0.3, 0.2, 0.1], atol=1e-9)
    assert geppo.epsilon == pytest.approx(0.1)
    assert geppo.adaptive


def test_geppo_with_equal_batches_is_ppo_setup():
    setup = resolve_setup(TrainerConfig(algorithm="geppo", n=2048, N=2048))
    assert setup.weights.M == 1
    assert setup.epsilon == pytest.approx(0.2, abs=1e-15)


def test_config_hash_is_stable_and_ignores_progress():
    a = TrainerConfig(seed=3)
    assert config_hash(a) == config_hash(TrainerConfig(seed=3))
    assert config_hash(a) == config_hash(with_overrides(a, progress=False))
    assert config_hash(a) != config_hash(with_overrides(a, seed=4))


def test_load_config(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"env": "pendulum", "seed": 5}))
    config, overrides = load_config(path)
    assert config.env == "pendulum" and config.seed == 5
    assert overrides == {"env": "pendulum", "seed": 5}

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    config, _ = load_config(path)
    resolve_setup(config)


def test_describe_mentions_resolved_values():
    lines = describe(TrainerConfig())
    assert any("M=4" in line for line in lines)

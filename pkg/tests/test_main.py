import json

import pytest

import main as main_module
from main import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main

SMALL = {"algorithm": "ppo", "env": "point_mass", "n": 64, "N": 128, "total_steps": 256, "minibatches": 4,
         "epochs": 2, "hidden_sizes": [8], "eval_episodes": 1}


def test_weights_command_prints_json(capsys):
    assert main(["--log-level", "WARNING", "weights", "--B", "2"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["program"] == "essopt"
    assert doc["nu"] == pytest.approx([0.4, 0.3, 0.2, 0.1], abs=1e-9)
    assert doc["effective_M"] == 4
    assert doc["epsilon"] == pytest.approx(0.1)


def test_usage_errors_exit_with_two():
    assert main([]) == EXIT_USAGE
    assert main(["verify", "lemmas"]) == EXIT_USAGE
    assert main(["weights", "--B", "0"]) == EXIT_USAGE


def test_help_exits_cleanly():
    assert main(["--help"]) == EXIT_OK


def test_bad_config_exits_with_two(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"algorithm": "trpo"}))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "runs")]) == EXIT_USAGE


def test_verify_weights(tmp_path):
    out = tmp_path / "report.json"
    assert main(["--log-level", "WARNING", "verify", "weights", "--out", str(out)]) == EXIT_OK
    assert json.loads(out.read_text())["passed"]


def test_train_compare_and_plot(tmp_path):
    config = tmp_path / "ppo.json"
    config.write_text(json.dumps(SMALL))
    runs = tmp_path / "runs"
    assert main(["train", "--config", str(config), "--seeds", "0", "1", "--out", str(runs), "--no-progress"]) == EXIT_OK
    assert (runs / "ppo_point_mass_seed1" / "summary.json").exists()

    table = tmp_path / "comparison.csv"
    assert main(["compare", str(runs), str(runs), "--out", str(table)]) == EXIT_OK
    assert table.exists()

    plots = tmp_path / "plots"
    assert main(["plot", str(runs), "--out", str(plots)]) == EXIT_OK
    assert (plots / "ppo_return.csv").exists()


def test_compare_missing_runs_fails(tmp_path):
    assert main(["compare", str(tmp_path / "nope"), str(tmp_path / "nope")]) == EXIT_FAILED


def test_module_logger_uses_module_name():
    assert main_module.logger.name == main_module.__name__

import json

import numpy as np
import pandas as pd
import pytest

import train_policy
from approximator import NonFiniteError
from config import TrainerConfig
from experiment_harness import (METRICS_FILE, SUMMARY_FILE, HarnessError, RunRecord, compare, emit_plot_data,
                                final_performance, load_run, load_runs, mean_curve, run_experiment, run_seeds,
                                seed_dir, seed_steps_table, steps_to_reach, write_comparison)

SMALL = dict(env="point_mass", n=64, N=128, total_steps=256, minibatches=4, epochs=2, hidden_sizes=(8,),
             eval_episodes=1, progress=False)


def synthetic_run(algorithm, seed, returns, steps=None, env="point_mass", epsilon=0.1):
    steps = steps or [1000 * (k + 1) for k in range(len(returns))]
    metrics = [{"iter": k, "steps": s, "eval_return": r, "tv_hat": 0.04}
               for k, (s, r) in enumerate(zip(steps, returns))]
    summary = {"avg_return": float(np.mean(returns)), "final_return": final_performance(returns),
               "epsilon": epsilon}
    return RunRecord({"algorithm": algorithm, "env": env, "seed": seed}, metrics, summary)


def ramp(offset=0.0):
    return [float(k) + offset for k in range(20)]


def test_final_performance_and_steps_to_reach():
    assert final_performance(list(range(20))) == pytest.approx(14.5)
    assert final_performance([3.0, None]) == 3.0
    assert np.isnan(final_performance([]))
    curve = pd.DataFrame({"steps": [10, 20, 30], "eval_return": [1.0, 5.0, 9.0]})
    assert steps_to_reach(curve, 5.0) == 20
    assert steps_to_reach(curve, 10.0) is None


def test_run_experiment_writes_files_and_is_reproducible(tmp_path):
    config = TrainerConfig(algorithm="geppo", **SMALL)
    first = run_experiment(config, tmp_path / "a")
    second = run_experiment(config, tmp_path / "b")
    assert (tmp_path / "a" / METRICS_FILE).read_bytes() == (tmp_path / "b" / METRICS_FILE).read_bytes()
    assert first.digest() == second.digest()

    doc = json.loads((tmp_path / "a" / SUMMARY_FILE).read_text())
    summary = doc["summary"]
    assert doc["config"]["algorithm"] == "geppo"
    assert summary["iterations"] == 4
    assert summary["steps"] == 256
    assert summary["M"] == 4
    assert summary["epsilon"] == pytest.approx(0.1)
    assert not summary["diverged"]
    assert summary["overrides"]["n"] == 64


def test_run_without_iterations_has_no_returns(tmp_path):
    record = run_experiment(TrainerConfig(algorithm="geppo", **{**SMALL, "total_steps": 0}), tmp_path)
    assert record.metrics == []
    assert record.summary["iterations"] == 0
    assert record.summary["steps"] == 0
    assert record.summary["avg_return"] is None
    assert record.summary["final_return"] is None
    doc = json.loads((tmp_path / SUMMARY_FILE).read_text())
    assert doc["summary"]["final_return"] is None
    assert load_run(tmp_path) == record


def test_run_record_json_round_trip(tmp_path):
    record = run_experiment(TrainerConfig(algorithm="ppo", **SMALL), tmp_path)
    assert RunRecord.from_json(json.loads(json.dumps(record.to_json()))) == record
    assert load_run(tmp_path) == record
    assert load_run(tmp_path).digest() == record.digest()


def test_run_experiment_records_divergence(tmp_path, monkeypatch):
    def explode(*args, **kwargs):
        raise NonFiniteError("loss is NaN")

    monkeypatch.setattr(train_policy, "adam_step", explode)
    record = run_experiment(TrainerConfig(algorithm="ppo", **SMALL), tmp_path)
    assert record.diverged
    assert "NaN" in record.summary["error"]
    assert record.metrics == []
    assert load_runs(tmp_path)[0].diverged


def test_threshold_steps(tmp_path):
    record = run_experiment(TrainerConfig(algorithm="ppo", **SMALL), tmp_path, threshold=-1e9)
    assert record.summary["steps_to_threshold"] == 128


def test_run_seeds_and_load_runs(tmp_path):
    config = TrainerConfig(algorithm="ppo", **SMALL)
    records = run_seeds(config, [0, 1], tmp_path)
    assert [r.config["seed"] for r in records] == [0, 1]
    assert seed_dir(tmp_path, config) == tmp_path / "ppo_point_mass_seed0"
    assert (tmp_path / "ppo_point_mass_seed1").is_dir()
    loaded = load_runs(tmp_path)
    assert [r.digest() for r in loaded] == [r.digest() for r in records]
    assert load_runs(tmp_path / "ppo_point_mass_seed0")[0].config["seed"] == 0
    (tmp_path / "empty").mkdir()
    with pytest.raises(HarnessError):
        load_runs(tmp_path / "empty")


def test_mean_curve_aligns_on_shared_steps():
    a = synthetic_run("ppo", 0, [1.0, 2.0, 3.0])
    b = synthetic_run("ppo", 1, [3.0, 4.0], steps=[2000, 3000])
    curve = mean_curve([a, b])
    assert curve["steps"].tolist() == [2000, 3000]
    np.testing.assert_allclose(curve["mean"], [2.5, 3.5])
    np.testing.assert_allclose(curve["stderr"], [0.5, 0.5])


def test_compare_identical_sets():
    runs = [synthetic_run("ppo", s, ramp(s)) for s in range(3)]
    table = compare(runs, runs).set_index("metric")
    assert table.loc["avg_return", "improvement_pct"] == 0.0
    assert table.loc["steps_to_baseline_final", "ratio"] == 1.0
    assert table.attrs["env"] == "point_mass"


def test_compare_detects_faster_candidate():
    steps = [1000 * (k + 1) for k in range(20)]
    base = [synthetic_run("ppo", s, ramp(), steps) for s in range(2)]
    fast = [synthetic_run("geppo", s, ramp(), [int(0.75 * x) for x in steps]) for s in range(2)]
    table = compare(base, fast).set_index("metric")
    assert table.loc["steps_to_baseline_final", "ratio"] == pytest.approx(0.75)
    per_seed = seed_steps_table(base, fast)
    np.testing.assert_allclose(per_seed["ratio"], 0.75)


def test_compare_reports_exact_ratio_for_shifted_curve():
    steps = [1000 * (k + 1) for k in range(20)]
    shifted = [750 * (k + 1) for k in range(20)]
    base = [synthetic_run("ppo", s, ramp(), steps) for s in range(3)]
    fast = [synthetic_run("geppo", s, ramp(), shifted) for s in range(3)]
    table = compare(base, fast).set_index("metric")
    assert table.loc["steps_to_baseline_final", "ratio"] == 0.75
    assert seed_steps_table(base, fast)["ratio"].tolist() == [0.75, 0.75, 0.75]


def test_compare_stderr_over_five_seeds():
    runs = [synthetic_run("ppo", s, ramp(float(s) ** 2)) for s in range(5)]
    finals = np.array([14.5 + s ** 2 for s in range(5)])
    table = compare(runs, runs).set_index("metric")
    assert table.loc["final_return", "a_mean"] == pytest.approx(finals.mean(), rel=1e-12)
    assert table.loc["final_return", "a_stderr"] == pytest.approx(np.std(finals, ddof=1) / np.sqrt(5), rel=1e-12)


def test_compare_skips_runs_without_returns():
    runs = [synthetic_run("ppo", s, ramp()) for s in range(2)]
    runs[1].summary["final_return"] = None
    table = compare(runs, runs).set_index("metric")
    assert table.loc["final_return", "a_mean"] == pytest.approx(14.5)
    assert np.isnan(table.loc["final_return", "a_stderr"])


def test_compare_single_seed_has_nan_stderr():
    table = compare([synthetic_run("ppo", 0, ramp())], [synthetic_run("geppo", 0, ramp(1.0))]).set_index("metric")
    assert np.isnan(table.loc["final_return", "a_stderr"])
    assert table.loc["final_return", "improvement_pct"] == pytest.approx(100.0 / 14.5)


def test_compare_rejects_mismatched_envs():
    with pytest.raises(HarnessError):
        compare([synthetic_run("ppo", 0, ramp())], [synthetic_run("geppo", 0, ramp(), env="pendulum")])
    with pytest.raises(HarnessError):
        compare([], [synthetic_run("geppo", 0, ramp())])


def test_write_comparison(tmp_path):
    runs = [synthetic_run("ppo", 0, ramp())]
    path = write_comparison(compare(runs, runs), tmp_path / "out" / "comparison.csv")
    assert pd.read_csv(path)["metric"].tolist() == ["avg_return", "final_return", "steps_to_baseline_final"]


def test_emit_plot_data(tmp_path):
    runs = [synthetic_run("ppo", 0, ramp(), epsilon=0.2), synthetic_run("geppo", 0, ramp(), epsilon=0.1)]
    written = emit_plot_data(runs, tmp_path, png=True)
    names = {p.name for p in written}
    assert names == {"ppo_return.csv", "ppo_tv.csv", "geppo_return.csv", "geppo_tv.csv", "return.png", "tv.png"}
    tv = pd.read_csv(tmp_path / "geppo_tv.csv")
    assert list(tv.columns) == ["steps", "mean", "stderr", "target"]
    np.testing.assert_allclose(tv["target"], 0.05)
    assert (tmp_path / "return.png").stat().st_size > 0

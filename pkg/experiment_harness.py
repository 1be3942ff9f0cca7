"""
Run experiments, compare algorithms and export learning curves.

A run directory holds metrics.jsonl (one record per iteration, sorted keys)
and summary.json. Everything here is deterministic given the config and seed;
wall-clock times go to the log only.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from config import TrainerConfig, config_hash, config_overrides, resolve_setup, with_overrides
from train_policy import TrainingDiverged, train

logger = logging.getLogger(__name__)

FINAL_WINDOW = 10
METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.json"


class HarnessError(ValueError):
    """Runs that cannot be compared or loaded."""


@dataclass
class RunRecord:
    config: dict
    metrics: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def algorithm(self) -> str:
        return self.config["algorithm"]

    @property
    def env(self) -> str:
        return self.config["env"]

    @property
    def diverged(self) -> bool:
        return bool(self.summary.get("diverged", False))

    def curve(self, key: str = "eval_return") -> pd.DataFrame:
        """(steps, key) rows where the metric was recorded."""
        rows = [(m["steps"], m[key]) for m in self.metrics if m.get(key) is not None]
        return pd.DataFrame(rows, columns=["steps", key])

    def to_json(self) -> dict:
        return {"config": self.config, "metrics": self.metrics, "summary": self.summary}

    @classmethod
    def from_json(cls, doc: dict) -> "RunRecord":
        return cls(config=doc["config"], metrics=list(doc.get("metrics", [])), summary=dict(doc.get("summary", {})))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode("utf-8")).hexdigest()


def final_performance(returns: Sequence[float], window: int = FINAL_WINDOW) -> float:
    """Mean of the last `window` evaluation returns."""
    returns = [r for r in returns if r is not None]
    if not returns:
        return float("nan")
    return float(np.mean(returns[-window:]))


def steps_to_reach(curve: pd.DataFrame, target: float, key: str = "eval_return") -> Optional[int]:
    """First step count at which the curve reaches target, or None."""
    hit = curve[curve[key] >= target]
    if hit.empty:
        return None
    return int(hit["steps"].iloc[0])


def summarize(config: TrainerConfig, metrics: List[dict], overrides: dict, threshold: Optional[float] = None,
              error: Optional[str] = None) -> dict:
    setup = resolve_setup(config)
    returns = [m["eval_return"] for m in metrics if m.get("eval_return") is not None]
    record = RunRecord(config.to_dict(), metrics)
    return {
        "config_hash": config_hash(config),
        "algorithm": config.algorithm,
        "env": config.env,
        "seed": config.seed,
        "overrides": overrides,
        "batch_size": setup.batch_size,
        "M": setup.weights.M,
        "nu": [float(v) for v in setup.weights.nu],
        "epsilon": setup.epsilon,
        "adaptive": setup.adaptive,
        "iterations": len(metrics),
        "steps": metrics[-1]["steps"] if metrics else 0,
        "avg_return": float(np.mean(returns)) if returns else None,
        "final_return": final_performance(returns) if returns else None,
        "threshold": threshold,
        "steps_to_threshold": None if threshold is None else steps_to_reach(record.curve(), threshold),
        "diverged": error is not None,
        "error": error,
    }


def format_return(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def run_experiment(config: TrainerConfig, out_dir, overrides: Optional[dict] = None,
                   threshold: Optional[float] = None) -> RunRecord:
    """Train one seed, streaming metrics to out_dir/metrics.jsonl. Divergence is recorded, not raised."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    overrides = config_overrides(config) if overrides is None else overrides
    metrics: List[dict] = []
    error = None

    with open(out_dir / METRICS_FILE, "w") as f:
        def on_record(record):
            metrics.append(record)
            f.write(json.dumps(record, sort_keys=True) + "\n")
            f.flush()

        try:
            train(config, on_record=on_record, checkpoint_path=out_dir / "checkpoint.joblib")
        except TrainingDiverged as e:
            logger.error(f"{config.algorithm} seed {config.seed} diverged: {e}")
            error = str(e)

    summary = summarize(config, metrics, overrides, threshold, error)
    with open(out_dir / SUMMARY_FILE, "w") as f:
        json.dump({"config": config.to_dict(), "summary": summary}, f, indent=2, sort_keys=True)
    logger.info(f"{config.algorithm} seed {config.seed}: final return {format_return(summary['final_return'])} "
                f"-> {out_dir}")
    return RunRecord(config.to_dict(), metrics, summary)


def load_run(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    try:
        with open(run_dir / SUMMARY_FILE) as f:
            doc = json.load(f)
        with open(run_dir / METRICS_FILE) as f:
            metrics = [json.loads(line) for line in f if line.strip()]
    except (OSError, json.JSONDecodeError) as e:
        raise HarnessError(f"cannot load run from {run_dir}: {e}") from e
    return RunRecord(doc["config"], metrics, doc["summary"])


def load_runs(path) -> List[RunRecord]:
    """A single run directory, or every run directory directly below path."""
    path = Path(path)
    if (path / SUMMARY_FILE).exists():
        return [load_run(path)]
    if not path.is_dir():
        raise HarnessError(f"no such run directory: {path}")
    runs = [load_run(p) for p in sorted(path.iterdir()) if (p / SUMMARY_FILE).exists()]
    if not runs:
        raise HarnessError(f"no runs found under {path}")
    return runs


def seed_dir(out_root, config: TrainerConfig) -> Path:
    return Path(out_root) / f"{config.algorithm}_{config.env}_seed{config.seed}"


def _run_one(config: TrainerConfig, out_root, threshold):
    # worker processes do not inherit the parent's logging setup
    return run_experiment(config, seed_dir(out_root, config), threshold=threshold)


def run_seeds(config: TrainerConfig, seeds: Iterable[int], out_root, n_jobs: int = 1,
              threshold: Optional[float] = None) -> List[RunRecord]:
    """One run per seed, in parallel; results come back in seed order."""
    configs = [with_overrides(config, seed=int(s), progress=config.progress and n_jobs == 1) for s in seeds]
    logger.info(f"running {len(configs)} seeds of {config.algorithm} on {config.env} with {n_jobs} jobs")
    if n_jobs == 1:
        return [_run_one(c, out_root, threshold) for c in configs]
    return Parallel(n_jobs=n_jobs)(delayed(_run_one)(c, out_root, threshold) for c in configs)


def _mean_stderr(values) -> tuple:
    values = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    if values.size == 1:
        return float(values[0]), float("nan")
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def mean_curve(records: Sequence[RunRecord], key: str = "eval_return") -> pd.DataFrame:
    """Seed-mean curve with standard error, aligned on step counts shared by every run."""
    frames = [r.curve(key).set_index("steps")[key].rename(i) for i, r in enumerate(records)]
    table = pd.concat(frames, axis=1, join="inner").sort_index()
    n = table.shape[1]
    stderr = table.std(axis=1, ddof=1) / np.sqrt(n) if n > 1 else pd.Series(0.0, index=table.index)
    return pd.DataFrame({"steps": table.index.astype(np.int64), "mean": table.mean(axis=1).to_numpy(),
                         "stderr": stderr.to_numpy()}).reset_index(drop=True)


def _check_comparable(records_a: Sequence[RunRecord], records_b: Sequence[RunRecord]):
    if not records_a or not records_b:
        raise HarnessError("both sides of a comparison need at least one run")
    envs = {r.env for r in records_a} | {r.env for r in records_b}
    if len(envs) != 1:
        raise HarnessError(f"runs come from different environments: {sorted(envs)}")


def compare(records_a: Sequence[RunRecord], records_b: Sequence[RunRecord]) -> pd.DataFrame:
    """
    Average and final performance of b against baseline a, plus the sample-efficiency ratio.

    The last row compares the steps each seed-mean curve needs to reach the
    baseline's final seed-mean performance; its ratio is steps_b / steps_a.
    """
    _check_comparable(records_a, records_b)
    rows = []
    for metric in ("avg_return", "final_return"):
        a_mean, a_se = _mean_stderr([r.summary.get(metric) for r in records_a])
        b_mean, b_se = _mean_stderr([r.summary.get(metric) for r in records_b])
        improvement = (b_mean - a_mean) / abs(a_mean) * 100.0 if a_mean else float("nan")
        rows.append({"metric": metric, "a_mean": a_mean, "a_stderr": a_se, "b_mean": b_mean,
                     "b_stderr": b_se, "improvement_pct": improvement, "ratio": float("nan")})

    curve_a = mean_curve(records_a).rename(columns={"mean": "eval_return"})
    curve_b = mean_curve(records_b).rename(columns={"mean": "eval_return"})
    target = final_performance(curve_a["eval_return"].tolist())
    steps_a, steps_b = steps_to_reach(curve_a, target), steps_to_reach(curve_b, target)
    ratio = steps_b / steps_a if steps_a and steps_b is not None else float("nan")
    rows.append({"metric": "steps_to_baseline_final",
                 "a_mean": float("nan") if steps_a is None else float(steps_a), "a_stderr": float("nan"),
                 "b_mean": float("nan") if steps_b is None else float(steps_b), "b_stderr": float("nan"),
                 "improvement_pct": float("nan"), "ratio": ratio})

    table = pd.DataFrame(rows)
    table.attrs.update(a=records_a[0].algorithm, b=records_b[0].algorithm, env=records_a[0].env, target=target)
    return table


def seed_steps_table(records_a: Sequence[RunRecord], records_b: Sequence[RunRecord]) -> pd.DataFrame:
    """Per-seed steps to reach the baseline's final seed-mean performance, matched on seed."""
    _check_comparable(records_a, records_b)
    target, _ = _mean_stderr([r.summary.get("final_return") for r in records_a])
    by_seed_a = {r.config["seed"]: r for r in records_a}
    rows = []
    for rec_b in records_b:
        seed = rec_b.config["seed"]
        rec_a = by_seed_a.get(seed)
        steps_a = steps_to_reach(rec_a.curve(), target) if rec_a is not None else None
        steps_b = steps_to_reach(rec_b.curve(), target)
        rows.append({"seed": seed, "target": target, "steps_a": steps_a, "steps_b": steps_b,
                     "ratio": steps_b / steps_a if steps_a and steps_b is not None else float("nan")})
    return pd.DataFrame(rows)


def write_comparison(table: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False)
    logger.info(f"comparison of {table.attrs.get('b')} against {table.attrs.get('a')} saved to {path}")
    return path


def _group(records: Sequence[RunRecord]) -> Dict[str, List[RunRecord]]:
    groups: Dict[str, List[RunRecord]] = {}
    for r in records:
        groups.setdefault(r.algorithm, []).append(r)
    return groups


def emit_plot_data(records: Sequence[RunRecord], out_dir, png: bool = False) -> List[Path]:
    """
    Per-algorithm CSVs of the seed-mean return and TV curves.

    The TV file carries the epsilon / 2 target line the learning-rate
    controller steers toward. With png=True, one figure per curve kind.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, curves = [], {}
    for algorithm, group in _group(records).items():
        returns = mean_curve(group, "eval_return")
        tv = mean_curve(group, "tv_hat")
        tv["target"] = group[0].summary["epsilon"] / 2.0
        for kind, frame in (("return", returns), ("tv", tv)):
            path = out_dir / f"{algorithm}_{kind}.csv"
            frame.to_csv(path, index=False)
            written.append(path)
        curves[algorithm] = (returns, tv)
    if png:
        written.extend(_plot(curves, out_dir))
    logger.info(f"wrote {len(written)} plot files to {out_dir}")
    return written


def _plot(curves: dict, out_dir: Path) -> List[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for index, (kind, ylabel) in enumerate((("return", "evaluation return"), ("tv", "estimated TV"))):
        fig, ax = plt.subplots(figsize=(8, 5))
        for algorithm, frames in curves.items():
            frame = frames[index]
            line, = ax.plot(frame["steps"], frame["mean"], label=algorithm)
            ax.fill_between(frame["steps"], frame["mean"] - frame["stderr"], frame["mean"] + frame["stderr"],
                            color=line.get_color(), alpha=0.2)
            if kind == "tv":
                ax.plot(frame["steps"], frame["target"], linestyle="--", color=line.get_color(), alpha=0.7)
        ax.set_xlabel("steps")
        ax.set_ylabel(ylabel)
        ax.legend()
        ax.grid(True, alpha=0.3)
        path = out_dir / f"{kind}.png"
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


"""
Command-line entry point.

    python main.py train --config configs/point_mass_geppo.json --seeds 0 1 2 --jobs 3
    python main.py compare runs/ppo runs/geppo --out comparison.csv
    python main.py verify all --count 100
    python main.py plot runs/ppo runs/geppo --out plots --png
    python main.py weights --B 2 --program essopt --m-bar 8

Exit codes: 0 success, 1 failed run or verification, 2 usage error.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from config import LOG_LEVEL, OUTPUT_DIR, ConfigError, config_from_dict, load_config, with_overrides
from experiment_harness import (HarnessError, compare, emit_plot_data, format_return, load_runs, run_seeds,
                                seed_steps_table, write_comparison)
from policy_weights import PROGRAMS, WeightsError, epsilon_mapping, resolve_weights
from verify_suites import SUITES, run_suite

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def setup_logging(level: str = LOG_LEVEL, log_file=None):
    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(level=level.upper(), format="%(asctime)s [%(levelname)s] %(message)s",
                        handlers=handlers, force=True)
    return logger


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geppo", description="PPO / GePPO policy optimization experiments")
    parser.add_argument("--log-level", default=LOG_LEVEL)
    parser.add_argument("--log-file", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train one or more seeds from a JSON config")
    train.add_argument("--config", default=None, help="JSON config; omitted fields take defaults")
    group = train.add_mutually_exclusive_group()
    group.add_argument("--seed", type=int, default=None)
    group.add_argument("--seeds", type=int, nargs="+", default=None)
    train.add_argument("--jobs", type=int, default=1)
    train.add_argument("--out", default=OUTPUT_DIR)
    train.add_argument("--threshold", type=float, default=None, help="return level for steps-to-threshold")
    train.add_argument("--no-progress", action="store_true")

    comp = sub.add_parser("compare", help="compare two sets of runs (baseline first)")
    comp.add_argument("baseline")
    comp.add_argument("candidate")
    comp.add_argument("--out", default=None, help="CSV path for the comparison table")

    verify = sub.add_parser("verify", help="run randomized verification suites")
    verify.add_argument("suite", choices=SUITES + ("all",))
    verify.add_argument("--count", type=int, default=None)
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--out", default=None, help="write the JSON report here as well")

    plot = sub.add_parser("plot", help="export learning curves as CSV (and PNG)")
    plot.add_argument("dirs", nargs="+")
    plot.add_argument("--out", default="plots")
    plot.add_argument("--png", action="store_true")

    weights = sub.add_parser("weights", help="print the policy weights for a batch-size ratio")
    weights.add_argument("--B", type=int, required=True)
    weights.add_argument("--program", choices=PROGRAMS, default="essopt")
    weights.add_argument("--m-bar", type=int, default=8)
    weights.add_argument("--eps-ppo", type=float, default=0.2)
    return parser


def cmd_train(args) -> int:
    if args.config:
        config, _ = load_config(args.config)
    else:
        config, _ = config_from_dict({})
    if args.no_progress:
        config = with_overrides(config, progress=False)
    seeds = args.seeds if args.seeds is not None else [config.seed if args.seed is None else args.seed]
    records = run_seeds(config, seeds, Path(args.out), n_jobs=args.jobs, threshold=args.threshold)
    for rec in records:
        s = rec.summary
        if s["diverged"]:
            status = f"DIVERGED ({s['error']})"
        else:
            status = f"final return {format_return(s['final_return'])}"
        print(f"{s['algorithm']} seed {s['seed']}: {status}")
    return EXIT_FAILED if any(r.diverged for r in records) else EXIT_OK


def cmd_compare(args) -> int:
    baseline, candidate = load_runs(args.baseline), load_runs(args.candidate)
    table = compare(baseline, candidate)
    print(f"{table.attrs['b']} vs {table.attrs['a']} on {table.attrs['env']}")
    print(table.to_string(index=False))
    print(seed_steps_table(baseline, candidate).to_string(index=False))
    if args.out:
        write_comparison(table, args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    report = run_suite(args.suite, args.count, args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK if report["passed"] else EXIT_FAILED


def cmd_plot(args) -> int:
    records = [rec for d in args.dirs for rec in load_runs(d)]
    for path in emit_plot_data(records, args.out, png=args.png):
        print(path)
    return EXIT_OK


def cmd_weights(args) -> int:
    nu = resolve_weights(args.program, args.B, args.m_bar)
    print(json.dumps({
        "program": args.program,
        "B": args.B,
        "nu": [float(v) for v in nu.nu],
        "effective_M": nu.effective_m,
        "epsilon": epsilon_mapping(nu, args.eps_ppo),
        "ess_factor": nu.ess_per_n,
    }, indent=2))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "compare": cmd_compare,
    "verify": cmd_verify,
    "plot": cmd_plot,
    "weights": cmd_weights,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    setup_logging(args.log_level, args.log_file)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, WeightsError) as e:
        logger.error(f"invalid arguments: {e}")
        return EXIT_USAGE
    except HarnessError as e:
        logger.error(str(e))
        return EXIT_FAILED
    except KeyboardInterrupt:
        logger.info("interrupted by user")
        return EXIT_FAILED
    except Exception as e:
        logger.error(f"fatal error: {e}")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())

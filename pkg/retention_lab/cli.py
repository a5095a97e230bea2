"""
Command-line entry point.

Usage:
  retention-lab [--config FILE] [--preset kuairand|movielens] [--seed N] [--out DIR] [--log LEVEL] <command> ...

Commands: train, eval, gradcheck, sanity, calibrate, sweep, ablation, compare.
Exit codes: 0 success, 1 error, 2 failed acceptance check.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from dotenv import load_dotenv

from retention_lab.calibration import fit_rates, load_interactions, write_calibration
from retention_lab.config import PRESETS, RunConfig, parse_config
from retention_lab.exceptions import LabError
from retention_lab.experiments import DEFAULT_ALPHAS, run_ablation, run_compare, run_sweep
from retention_lab.runner import run_eval, run_gradcheck, run_sanity, run_train
from retention_lab.utils import resolve_run_dir, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retention-lab",
        description="Train and evaluate flow-network recommendation policies for user retention.",
    )
    parser.add_argument("--config", type=Path, default=None, help="Path to a 'key = value' config file.")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="kuairand",
                        help="Hyperparameter preset applied before the config file (default: kuairand).")
    parser.add_argument("--seed", type=int, default=None, help="Master seed (overrides run.seed).")
    parser.add_argument("--out", dest="out_dir", default=None,
                        help="Run directory (overrides run.out_dir; default: $RETENTION_LAB_OUT/<command>_<time>).")
    parser.add_argument("--log", default=None, help="Log level (default: $RETENTION_LAB_LOG_LEVEL or INFO).")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", help="Interleave rollouts and training; write metrics and a checkpoint.")

    p_eval = sub.add_parser("eval", help="Evaluate a frozen policy on a fresh simulator.")
    p_eval.add_argument("--checkpoint", type=Path, default=None, help="checkpoint.txt or cem.txt.")
    p_eval.add_argument("--episodes", type=int, default=None, help="Episodes (default: run.eval_episodes).")

    p_grad = sub.add_parser("gradcheck", help="Finite-difference check of every network.")
    p_grad.add_argument("--eps", type=float, default=1e-3)
    p_grad.add_argument("--tol", type=float, default=1e-4)

    p_sanity = sub.add_parser("sanity", help="Tabular flow-matching check on an enumerable tree.")
    p_sanity.add_argument("--depth", type=int, default=3)
    p_sanity.add_argument("--branching", type=int, default=3)
    p_sanity.add_argument("--steps", type=int, default=8000)
    p_sanity.add_argument("--lr", type=float, default=0.02)
    p_sanity.add_argument("--reward-seed", type=int, default=7)
    p_sanity.add_argument("--tv-threshold", type=float, default=0.05)

    p_calib = sub.add_parser("calibrate", help="Fit behavior weights and base logits from an interaction log.")
    p_calib.add_argument("--logs", type=Path, required=True, help="CSV with user_id,item_id and 0/1 behavior columns.")
    p_calib.add_argument("--calib-out", type=Path, default=None,
                         help="Output config fragment (default: <run dir>/calibration.conf).")

    p_sweep = sub.add_parser("sweep", help="Train and evaluate over a range of alpha values.")
    p_sweep.add_argument("--alphas", type=float, nargs="+", default=list(DEFAULT_ALPHAS))

    sub.add_parser("ablation", help="Default vs NCD, NIF and SIF on one seed.")

    p_cmp = sub.add_parser("compare", help="GFN vs CEM vs random over several seeds.")
    p_cmp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    config = parse_config(args.config, preset=args.preset)
    if args.seed is not None:
        config.set("run.seed", args.seed)
    if args.out_dir is not None:
        config.set("run.out_dir", args.out_dir)
    return config


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    run_train(config, resolve_run_dir(config["run.out_dir"], "train"))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    episodes = args.episodes if args.episodes is not None else config["run.eval_episodes"]
    metrics = run_eval(config, args.checkpoint, episodes, resolve_run_dir(config["run.out_dir"], "eval"))
    print("\n=== Evaluation ===")
    for name, value in metrics.items():
        print(f"{name:>16}: {value:.4f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    reports = run_gradcheck(config, eps=args.eps, tol=args.tol)
    print("\n=== Gradient check ===")
    for name, report in reports.items():
        status = "ok" if report.passed else f"FAILED ({report.offending_name})"
        print(f"{name:>10}: max rel err {report.max_rel_error:.3e}  {status}")
    return EXIT_OK if all(r.passed for r in reports.values()) else EXIT_CHECK_FAILED


def cmd_sanity(args: argparse.Namespace, config: RunConfig) -> int:
    result = run_sanity(
        depth=args.depth,
        branching=args.branching,
        steps=args.steps,
        lr=args.lr,
        reward_seed=args.reward_seed,
        seed=config["run.seed"],
        tv_threshold=args.tv_threshold,
    )
    print("\n=== Tabular sanity check ===")
    print(f"terminal TV: {result.tv:.4f} (threshold {result.threshold})")
    print(f"two-leaf probabilities: {[round(float(p), 4) for p in result.small_probs]}")
    return EXIT_OK if result.passed else EXIT_CHECK_FAILED


def cmd_calibrate(args: argparse.Namespace, config: RunConfig) -> int:
    stats = load_interactions(args.logs)
    omega, c = fit_rates(stats)
    out = args.calib_out or resolve_run_dir(config["run.out_dir"], "calibrate") / "calibration.conf"
    write_calibration(out, omega, c)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace, config: RunConfig) -> int:
    frame = run_sweep(config, resolve_run_dir(config["run.out_dir"], "sweep"), args.alphas)
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_ablation(args: argparse.Namespace, config: RunConfig) -> int:
    frame = run_ablation(config, resolve_run_dir(config["run.out_dir"], "ablation"))
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, config: RunConfig) -> int:
    frame, checks = run_compare(config, resolve_run_dir(config["run.out_dir"], "compare"), args.seeds)
    print(frame.to_string(index=False))
    return EXIT_OK if checks.passed else EXIT_CHECK_FAILED


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "sanity": cmd_sanity,
    "calibrate": cmd_calibrate,
    "sweep": cmd_sweep,
    "ablation": cmd_ablation,
    "compare": cmd_compare,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.log)
    try:
        config = load_config(args)
        return COMMANDS[args.command](args, config)
    except (LabError, OSError) as exc:
        logger.exception("%s failed: %s", args.command, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

"""
Experiment tables: balance-parameter sweep, ablations and the seed-wise
comparison against the random and CEM baselines.

Each experiment trains and evaluates several configurations under one
parent directory and summarizes them in a CSV built with pandas.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import pandas as pd

from retention_lab.config import RunConfig
from retention_lab.evaluator import METRIC_NAMES
from retention_lab.runner import run_eval, run_train

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.5, 0.7, 0.9, 1.0, 1.1, 1.3, 1.5)
ABLATIONS: Dict[str, Dict[str, bool]] = {
    "default": {},
    "NCD": {"ablation.ncd": True},
    "NIF": {"ablation.nif": True},
    "SIF": {"ablation.sif": True},
}


def percent_change(value: float, reference: float) -> float:
    if reference == 0:
        return math.nan
    return (value - reference) / abs(reference) * 100.0


def _configure(config: RunConfig, **values) -> RunConfig:
    clone = config.override()
    for key, value in values.items():
        clone.set(key, value)
    return clone


def train_and_eval(config: RunConfig, run_dir: Path) -> Dict[str, float]:
    result = run_train(config, run_dir)
    checkpoint = None if config["run.policy"] == "random" else result.checkpoint
    return run_eval(config, checkpoint, config["run.eval_episodes"], run_dir / "eval")


def run_sweep(config: RunConfig, parent: Path, alphas: Sequence[float] = DEFAULT_ALPHAS) -> pd.DataFrame:
    """Return time and click rate per alpha, with percent change against alpha = 1."""
    rows: List[Dict[str, float]] = []
    for alpha in alphas:
        cfg = _configure(config, **{"train.alpha": float(alpha), "run.policy": "gfn"})
        metrics = train_and_eval(cfg, parent / f"alpha_{alpha:g}")
        rows.append({"alpha": float(alpha), **{k: metrics[k] for k in METRIC_NAMES}})

    frame = pd.DataFrame(rows)
    reference = frame.loc[frame["alpha"] == 1.0]
    for column in ("return_time", "click_rate"):
        ref = float(reference[column].iloc[0]) if not reference.empty else math.nan
        frame[f"{column}_change_pct"] = frame[column].apply(lambda v: percent_change(v, ref)).round(2)
    frame = frame[["alpha", "return_time", "return_time_change_pct", "click_rate", "click_rate_change_pct"]]
    out = parent / "sweep.csv"
    frame.to_csv(out, index=False, float_format="%.6f")
    logger.info("Saved: %s", out)
    return frame


def run_ablation(config: RunConfig, parent: Path) -> pd.DataFrame:
    """Default, NCD, NIF and SIF on one seed; percent change against default."""
    rows: List[Dict[str, float]] = []
    for variant, flags in ABLATIONS.items():
        cfg = _configure(config, **{"run.policy": "gfn", **flags})
        metrics = train_and_eval(cfg, parent / variant)
        rows.append({"variant": variant, **{k: metrics[k] for k in METRIC_NAMES}})

    frame = pd.DataFrame(rows)
    default = frame.iloc[0]
    for column in METRIC_NAMES:
        frame[f"{column}_change_pct"] = frame[column].apply(
            lambda v, ref=float(default[column]): percent_change(v, ref)
        ).round(2)
    out = parent / "ablation.csv"
    frame.to_csv(out, index=False, float_format="%.6f")
    logger.info("Saved: %s", out)
    return frame


@dataclass
class ComparisonChecks:
    beats_random_return_time: bool
    beats_random_retention: bool
    matches_cem_retention: bool

    @property
    def passed(self) -> bool:
        return self.beats_random_return_time and self.beats_random_retention and self.matches_cem_retention


def comparison_checks(
    frame: pd.DataFrame,
    return_time_margin: float = 0.10,
    retention_margin: float = 0.05,
) -> ComparisonChecks:
    """
    GFN return time at least 10% below random and retention at least 5% above
    random on every seed; GFN retention >= CEM on at least two thirds of seeds.
    """
    pivot = frame.pivot(index="seed", columns="policy")
    rt, ret = pivot["return_time"], pivot["retention"]
    beats_rt = bool((rt["gfn"] <= (1.0 - return_time_margin) * rt["random"]).all())
    beats_ret = bool((ret["gfn"] >= (1.0 + retention_margin) * ret["random"]).all())
    wins = int((ret["gfn"] >= ret["cem"]).sum())
    needed = math.ceil(2 * len(pivot) / 3)
    return ComparisonChecks(beats_rt, beats_ret, wins >= needed)


def run_compare(config: RunConfig, parent: Path, seeds: Sequence[int] = (0, 1, 2)) -> tuple[pd.DataFrame, ComparisonChecks]:
    rows: List[Dict[str, float]] = []
    for seed in seeds:
        for policy in ("gfn", "cem", "random"):
            cfg = _configure(config, **{"run.seed": int(seed), "run.policy": policy})
            if policy == "random":
                metrics = run_eval(cfg, None, cfg["run.eval_episodes"], parent / f"seed_{seed}" / policy)
            else:
                metrics = train_and_eval(cfg, parent / f"seed_{seed}" / policy)
            rows.append({"seed": int(seed), "policy": policy, **{k: metrics[k] for k in METRIC_NAMES}})

    frame = pd.DataFrame(rows)
    out = parent / "compare.csv"
    frame.to_csv(out, index=False, float_format="%.6f")
    logger.info("Saved: %s", out)
    checks = comparison_checks(frame)
    logger.info(
        "GFN vs random return time: %s | GFN vs random retention: %s | GFN vs CEM retention: %s",
        "ok" if checks.beats_random_return_time else "FAILED",
        "ok" if checks.beats_random_retention else "FAILED",
        "ok" if checks.matches_cem_retention else "FAILED",
    )
    return frame, checks

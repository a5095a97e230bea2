"""
Episode metrics: return time, retention, and click / long-view / like rates
over a rolling window, plus the JSONL run log and metrics CSV.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Deque, Dict, List, Optional

import pandas as pd

from retention_lab.exceptions import NotReadyError
from retention_lab.rollout import SessionTrajectory

logger = logging.getLogger(__name__)

METRIC_NAMES = ("return_time", "retention", "click_rate", "long_view_rate", "like_rate")
CSV_COLUMNS = ("episode",) + METRIC_NAMES + ("db_loss",)
LOG_KEYS = (
    "episode", "d", "R", "clicks", "long_views", "likes", "steps", "mean_r", "seed", "policy_tag",
)


@dataclass(frozen=True)
class EpisodeRecord:
    return_day: int
    retention: float
    clicks: int
    long_views: int
    likes: int
    steps: int
    mean_r: float
    seed: int
    policy_tag: str


def record_from_trajectory(
    trajectory: SessionTrajectory, seed: int, policy_tag: str, behaviors: tuple
) -> EpisodeRecord:
    counts = {b: 0 for b in ("click", "long_view", "like")}
    for step in trajectory.steps:
        for name, value in zip(behaviors, step.feedback):
            if name in counts:
                counts[name] += int(value > 0)
    rewards = trajectory.immediate_rewards
    return EpisodeRecord(
        return_day=int(trajectory.return_day),
        retention=float(trajectory.retention),
        clicks=counts["click"],
        long_views=counts["long_view"],
        likes=counts["like"],
        steps=trajectory.length,
        mean_r=math.fsum(rewards) / len(rewards),
        seed=seed,
        policy_tag=policy_tag,
    )


class MetricWindow:
    """The most recent ``size`` episode records."""

    def __init__(self, size: int = 1000, slate_size: int = 6) -> None:
        if size < 1:
            raise ValueError(f"window size must be positive, got {size}")
        self.size = size
        self.slate_size = slate_size
        self.records: Deque[EpisodeRecord] = deque(maxlen=size)

    def append(self, record: EpisodeRecord) -> None:
        impressions = record.steps * self.slate_size
        if max(record.clicks, record.long_views, record.likes) > impressions:
            raise ValueError(f"behavior counts exceed {impressions} impressions: {record}")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)


def compute_metrics(window: MetricWindow) -> Dict[str, float]:
    """Mean return day, mean retention and impression-normalized behavior rates."""
    records: List[EpisodeRecord] = list(window.records)
    if not records:
        raise NotReadyError("metric window is empty")
    n = len(records)
    impressions = math.fsum(r.steps * window.slate_size for r in records)
    return {
        "return_time": math.fsum(r.return_day for r in records) / n,
        "retention": math.fsum(r.retention for r in records) / n,
        "click_rate": math.fsum(r.clicks for r in records) / impressions,
        "long_view_rate": math.fsum(r.long_views for r in records) / impressions,
        "like_rate": math.fsum(r.likes for r in records) / impressions,
    }


def append_run_log(path: str | Path, record: EpisodeRecord, episode: int) -> None:
    """Append one JSON object per line with a fixed key order."""
    values = (
        episode,
        record.return_day,
        record.retention,
        record.clicks,
        record.long_views,
        record.likes,
        record.steps,
        record.mean_r,
        record.seed,
        record.policy_tag,
    )
    line = json.dumps(dict(zip(LOG_KEYS, values)))
    try:
        with open(path, mode="a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()
    except OSError as exc:
        raise OSError(f"cannot append to run log {path}: {exc}") from exc


class MetricsTable:
    """Rows of the metrics CSV, rewritten in full at every evaluation point."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.rows: List[Dict[str, Optional[float]]] = []

    def add(self, episode: int, metrics: Dict[str, float], db_loss: Optional[float]) -> None:
        row = {"episode": episode, **{k: metrics[k] for k in METRIC_NAMES}, "db_loss": db_loss}
        self.rows.append(row)
        logger.info(
            "Episode %d | return time %.4f | retention %.4f | click %.4f | db_loss %s",
            episode,
            metrics["return_time"],
            metrics["retention"],
            metrics["click_rate"],
            "n/a" if db_loss is None else f"{db_loss:.5f}",
        )

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(CSV_COLUMNS))

    def save(self) -> Path:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.frame().to_csv(self.path, index=False, float_format="%.6f")
        return self.path


def loss_progress(losses: List[float], fraction: float = 0.1) -> float:
    """
    Compare the median loss at the end of training with the start.

    Args:
        losses (List[float]): Per-step losses in training order.
        fraction (float): Share of steps in each window, in (0, 0.5].

    Returns:
        float: Median of the last window divided by the median of the first;
        0.5 or less means the loss at least halved.

    Raises:
        ValueError: When ``fraction`` is out of range.
        NotReadyError: When the two windows would overlap.
    """
    if not 0.0 < fraction <= 0.5:
        raise ValueError(f"fraction must lie in (0, 0.5], got {fraction}")
    n = max(1, int(len(losses) * fraction))
    if len(losses) < 2 * n:
        raise NotReadyError(f"need at least {2 * n} losses, got {len(losses)}")
    series = pd.Series(losses, dtype="float64")
    first = float(series.iloc[:n].median())
    return float(series.iloc[-n:].median()) / first if first > 0 else math.nan

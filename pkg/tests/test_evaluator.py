import json

import numpy as np
import pandas as pd
import pytest

from retention_lab.baselines import RandomPolicy
from retention_lab.evaluator import (
    CSV_COLUMNS,
    LOG_KEYS,
    EpisodeRecord,
    MetricsTable,
    MetricWindow,
    append_run_log,
    compute_metrics,
    loss_progress,
    record_from_trajectory,
)
from retention_lab.exceptions import NotReadyError
from retention_lab.rollout import collect_session


def _record(day=2, clicks=0, steps=1, long_views=0, likes=0):
    return EpisodeRecord(
        return_day=day,
        retention=1.0 / day,
        clicks=clicks,
        long_views=long_views,
        likes=likes,
        steps=steps,
        mean_r=0.5,
        seed=0,
        policy_tag="gfn",
    )


def test_mean_return_time():
    window = MetricWindow(size=10, slate_size=6)
    window.append(_record(day=2))
    window.append(_record(day=4))
    metrics = compute_metrics(window)
    assert metrics["return_time"] == 3.0
    assert metrics["retention"] == pytest.approx(0.375)


def test_click_on_every_impression():
    window = MetricWindow(size=10, slate_size=6)
    window.append(_record(clicks=6, steps=1))
    window.append(_record(clicks=18, steps=3))
    assert compute_metrics(window)["click_rate"] == 1.0


def test_metrics_ignore_record_order(rng):
    records = [
        _record(day=int(d), clicks=int(c), steps=3, likes=int(k))
        for d, c, k in zip(rng.integers(1, 11, 50), rng.integers(0, 19, 50), rng.integers(0, 19, 50))
    ]
    forward, shuffled = MetricWindow(100, 6), MetricWindow(100, 6)
    for r in records:
        forward.append(r)
    for i in rng.permutation(len(records)):
        shuffled.append(records[i])
    assert compute_metrics(forward) == compute_metrics(shuffled)


def test_window_keeps_most_recent():
    window = MetricWindow(size=2, slate_size=6)
    for day in (10, 1, 3):
        window.append(_record(day=day))
    assert compute_metrics(window)["return_time"] == 2.0


def test_empty_window():
    with pytest.raises(NotReadyError):
        compute_metrics(MetricWindow(size=5))


def test_counts_above_impressions_rejected():
    with pytest.raises(ValueError):
        MetricWindow(size=5, slate_size=6).append(_record(clicks=7, steps=1))


def test_record_from_trajectory(world):
    trajectory = collect_session(world, 0, RandomPolicy(world.config.d_action), np.random.default_rng(0))
    record = record_from_trajectory(trajectory, seed=5, policy_tag="random", behaviors=world.config.behaviors)
    assert record.steps == trajectory.length
    assert record.retention == 1.0 / record.return_day
    assert record.clicks == int(sum(step.feedback[0] for step in trajectory.steps))
    assert record.mean_r == pytest.approx(np.mean(trajectory.immediate_rewards))


def test_run_log_lines(tmp_path):
    path = tmp_path / "run_log.jsonl"
    for episode in range(1, 1001):
        append_run_log(path, _record(day=1 + episode % 10), episode)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 1000
    first = json.loads(lines[0])
    assert tuple(first) == LOG_KEYS
    assert first["episode"] == 1 and first["d"] == 2


def test_metrics_table_csv(tmp_path):
    table = MetricsTable(tmp_path / "out" / "metrics.csv")
    window = MetricWindow(size=5)
    window.append(_record(day=4, clicks=3))
    table.add(5, compute_metrics(window), db_loss=0.25)
    table.add(10, compute_metrics(window), db_loss=None)
    frame = pd.read_csv(table.save())
    assert tuple(frame.columns) == CSV_COLUMNS
    assert frame["episode"].tolist() == [5, 10]
    assert frame["click_rate"].iloc[0] == pytest.approx(0.5)
    assert np.isnan(frame["db_loss"].iloc[1])


def test_loss_progress():
    losses = [1.0] * 10 + [0.7] * 80 + [0.4] * 10
    assert loss_progress(losses) == pytest.approx(0.4)
    assert loss_progress([2.0, 1.0], fraction=0.5) == pytest.approx(0.5)
    with pytest.raises(NotReadyError):
        loss_progress([1.0])
    with pytest.raises(ValueError):
        loss_progress(losses, fraction=0.8)

import logging
import math

import numpy as np
import pytest

from retention_lab.calibration import (
    InteractionStats,
    behavior_name,
    fit_rates,
    load_interactions,
    write_calibration,
)
from retention_lab.config import parse_config
from retention_lab.exceptions import DegenerateRateError, FormatError
from retention_lab.user_env import BEHAVIORS, env_step, reset_session, world_init

HEADER = "user_id,item_id,session_id,click,long_view,like"


def _synthetic_rows(n):
    """Positive rates: click 0.4, long_view 0.2, like 0.05."""
    for i in range(n):
        click = int(i % 10 < 4)
        long_view = int(i % 5 == 0)
        like = int(i % 20 == 0)
        yield f"{i % 37},{i},{i // 50},{click},{long_view},{like}"


@pytest.fixture
def log_path(tmp_path):
    path = tmp_path / "interactions.csv"
    path.write_text("\n".join([HEADER, *_synthetic_rows(10_000)]) + "\n", encoding="utf-8")
    return path


def test_counts(log_path):
    stats = load_interactions(log_path)
    assert stats.row_count == 10_000
    assert stats.positives == {"click": 4000, "long_view": 2000, "like": 500}
    assert stats.malformed == 0
    assert stats.session_count == len({(i % 37, i // 50) for i in range(10_000)})


def test_ten_rows_four_clicks(tmp_path):
    path = tmp_path / "small.csv"
    rows = [f"u{i},i{i},{int(i < 4)}" for i in range(10)]
    path.write_text("\n".join(["user_id,item_id,click", *rows]) + "\n", encoding="utf-8")
    stats = load_interactions(path)
    assert stats.positives == {"click": 4}
    assert "like" not in stats.positives


def test_fit_rates_examples():
    omega, c = fit_rates(InteractionStats(row_count=10, positives={"click": 5, "like": 1}))
    assert c["click"] == 0.0
    assert c["like"] == pytest.approx(math.log(0.1 / 0.9))
    assert omega == pytest.approx({"click": 0.2, "like": 1.0})
    _, c = fit_rates(InteractionStats(row_count=5, positives={"click": 2}))
    assert c["click"] == pytest.approx(-0.405465, abs=1e-6)


@pytest.mark.parametrize("count", [0, 10])
def test_degenerate_rates(count):
    with pytest.raises(DegenerateRateError) as info:
        fit_rates(InteractionStats(row_count=10, positives={"click": 5, "like": count}))
    assert info.value.behavior == "like"


def test_header_only_log(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text(HEADER + "\n", encoding="utf-8")
    stats = load_interactions(path)
    assert stats.row_count == 0
    with pytest.raises(FormatError):
        fit_rates(stats)


@pytest.mark.parametrize(
    "text", ["", "user_id,click\n1,0\n", "user_id,item_id,session_id\n1,2,3\n"]
)
def test_format_errors(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(FormatError):
        load_interactions(path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_interactions(tmp_path / "missing.csv")


def test_few_malformed_rows_are_skipped(tmp_path, caplog):
    rows = list(_synthetic_rows(199)) + ["1,2,3,0,1,maybe"]
    path = tmp_path / "noisy.csv"
    path.write_text("\n".join([HEADER, *rows]) + "\n", encoding="utf-8")
    with caplog.at_level(logging.WARNING):
        stats = load_interactions(path)
    assert stats.malformed == 1
    assert stats.row_count == 199
    assert "malformed" in caplog.text


def test_too_many_malformed_rows(tmp_path):
    rows = list(_synthetic_rows(98)) + ["1,2,3,0,1,2", "1,2,3,0,1,0,extra"]
    path = tmp_path / "noisy.csv"
    path.write_text("\n".join([HEADER, *rows]) + "\n", encoding="utf-8")
    with pytest.raises(FormatError):
        load_interactions(path)


def test_fit_is_deterministic(log_path):
    assert fit_rates(load_interactions(log_path)) == fit_rates(load_interactions(log_path))


def test_calibrated_simulator_reproduces_rates(log_path, tmp_path):
    omega, c = fit_rates(load_interactions(log_path))
    calib = write_calibration(tmp_path / "calib.cfg", omega, c)
    config = parse_config(calib)
    assert config["calib.c.like"] == c["like"]
    for b in BEHAVIORS:
        config.set(f"env.kappa.{b}", 0.0)
    env = config.env_config()
    assert env.omega == tuple(omega[b] for b in BEHAVIORS)

    world = world_init(env, seed=0)
    rng = np.random.default_rng(1)
    positives, steps = np.zeros(len(BEHAVIORS)), 0
    while steps < 10_000:
        user_id = int(rng.integers(env.n_users))
        reset_session(world, user_id, rng)
        left = False
        while not left:
            slate = rng.choice(env.n_items, size=env.slate_size, replace=False)
            outcome = env_step(world, user_id, list(slate), rng)
            positives += outcome.feedback
            steps += 1
            left = outcome.left_session
    rates = positives / steps
    np.testing.assert_allclose(rates, [0.4, 0.2, 0.05], atol=0.03)


def _kuairand_log(tmp_path, n=200):
    path = tmp_path / "kuairand.csv"
    rows = [
        f"{i % 9},{i},{int(i % 4 == 0)},{int(i % 5 == 0)},{int(i % 10 == 0)},{1000 + 37 * i}"
        for i in range(n)
    ]
    header = "user_id,item_id,is_click,long_view,is_like,play_time_ms"
    path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
    return path


def test_numeric_columns_are_not_behaviors(tmp_path):
    stats = load_interactions(_kuairand_log(tmp_path))
    assert stats.malformed == 0
    assert stats.row_count == 200
    assert stats.positives == {"click": 50, "long_view": 40, "like": 20}
    assert stats.skipped_columns == ["play_time_ms"]


@pytest.mark.parametrize(
    "column, expected",
    [("is_click", "click"), ("Long_View", "long_view"), ("longview", "long_view"), ("is_follow", "is_follow")],
)
def test_behavior_names(column, expected):
    assert behavior_name(column) == expected


def test_prefixed_columns_round_trip(tmp_path):
    omega, c = fit_rates(load_interactions(_kuairand_log(tmp_path)))
    config = parse_config(write_calibration(tmp_path / "calib.cfg", omega, c))
    assert config["calib.omega.like"] == 1.0
    assert config["calib.omega.click"] == pytest.approx(0.4)
    assert config["calib.c.long_view"] == pytest.approx(math.log(0.2 / 0.8))


def test_unmodelled_behaviors_are_left_out(tmp_path, caplog):
    omega = {"click": 0.5, "is_follow": 1.0}
    c = {"click": 0.0, "is_follow": -3.0}
    with caplog.at_level(logging.WARNING):
        path = write_calibration(tmp_path / "calib.cfg", omega, c)
    assert "is_follow" in caplog.text
    config = parse_config(path)
    assert config["calib.omega.click"] == 1.0
    assert "is_follow" not in path.read_text(encoding="utf-8")


def test_no_modelled_behavior(tmp_path):
    with pytest.raises(FormatError):
        write_calibration(tmp_path / "calib.cfg", {"is_follow": 1.0}, {"is_follow": -3.0})

import pytest

from retention_lab.cli import EXIT_CHECK_FAILED, EXIT_ERROR, EXIT_OK, build_parser, main
from retention_lab.config import parse_config


def test_parser_defaults():
    args = build_parser().parse_args(["sanity"])
    assert (args.depth, args.branching, args.steps) == (3, 3, 8000)
    assert args.preset == "kuairand"
    with pytest.raises(SystemExit):
        build_parser().parse_args(["fly"])


def test_train_then_eval(small_config_file, tmp_path, capsys):
    train_dir = tmp_path / "train"
    assert main(["--config", str(small_config_file), "--out", str(train_dir), "train"]) == EXIT_OK
    assert (train_dir / "checkpoint.txt").exists()
    resolved = parse_config(train_dir / "config.resolved")
    assert resolved["train.batch_size"] == 4

    code = main([
        "--config", str(small_config_file), "--out", str(tmp_path / "eval"),
        "eval", "--checkpoint", str(train_dir / "checkpoint.txt"), "--episodes", "5",
    ])
    assert code == EXIT_OK
    assert "=== Evaluation ===" in capsys.readouterr().out


def test_seed_flag_overrides_config(small_config_file, tmp_path):
    out = tmp_path / "run"
    assert main(["--config", str(small_config_file), "--seed", "9", "--out", str(out), "train"]) == EXIT_OK
    assert parse_config(out / "config.resolved")["run.seed"] == 9


def test_eval_missing_checkpoint(small_config_file, tmp_path):
    code = main([
        "--config", str(small_config_file), "--out", str(tmp_path),
        "eval", "--checkpoint", str(tmp_path / "nope.txt"),
    ])
    assert code == EXIT_ERROR


def test_bad_config_file(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("train.gamma = 0.9\n", encoding="utf-8")
    assert main(["--config", str(path), "--out", str(tmp_path), "train"]) == EXIT_ERROR


def test_gradcheck_exit_codes(small_config_file):
    assert main(["--config", str(small_config_file), "gradcheck"]) == EXIT_OK
    assert main(["--config", str(small_config_file), "gradcheck", "--tol", "1e-30"]) == EXIT_CHECK_FAILED


def test_sanity_exit_codes():
    assert main(["sanity", "--depth", "2", "--branching", "2", "--steps", "3000", "--lr", "0.05"]) == EXIT_OK
    assert main(["sanity", "--depth", "2", "--steps", "1", "--lr", "0.001"]) == EXIT_CHECK_FAILED


def test_calibrate(tmp_path):
    logs = tmp_path / "log.csv"
    rows = [f"{i % 7},{i},{int(i % 4 == 0)},{int(i % 10 == 0)}" for i in range(400)]
    logs.write_text("\n".join(["user_id,item_id,click,like", *rows]) + "\n", encoding="utf-8")
    out = tmp_path / "calib.conf"
    assert main(["calibrate", "--logs", str(logs), "--calib-out", str(out)]) == EXIT_OK
    config = parse_config(out)
    assert config["calib.omega.like"] == 1.0
    assert config["calib.omega.click"] == pytest.approx(0.4)


def test_calibrate_degenerate_log(tmp_path):
    logs = tmp_path / "log.csv"
    logs.write_text("user_id,item_id,click\n1,1,0\n2,2,0\n", encoding="utf-8")
    assert main(["--out", str(tmp_path), "calibrate", "--logs", str(logs)]) == EXIT_ERROR

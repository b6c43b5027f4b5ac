import shutil
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from pregrasp.assets import data_path
from pregrasp.cli import VARIANTS, evaluate, guarded, main
from pregrasp.config import load_config
from pregrasp.errors import DataError, DivergenceError

TOY_TOML = """
[env]
objects = "toy"
obs_noise = false
max_steps_train = 30
max_steps_eval = 40

[env.mass_distributions]
box = [0.4, 0.05]

[train]
num_envs = 4
horizon = 8
minibatches = 4
epochs = 2
total_steps = 64
"""


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture()
def toy_cfg_path(tmp_path):
    path = tmp_path / "toy.toml"
    path.write_text(TOY_TOML)
    return path


def _run(runner, args, **kw):
    result = runner.invoke(main, [str(a) for a in args], **kw)
    if result.exception is not None and not isinstance(result.exception, SystemExit):
        raise result.exception
    return result


def test_help_lists_commands(runner):
    result = _run(runner, ["--help"])
    assert result.exit_code == 0
    for verb in ("sdf", "rollout", "train", "ablate", "eval", "report"):
        assert verb in result.output


def test_guard_maps_exceptions():
    with pytest.raises(SystemExit) as info:
        guarded(lambda: (_ for _ in ()).throw(DivergenceError("x")))()
    assert info.value.code == 3
    with pytest.raises(SystemExit) as info:
        guarded(lambda: (_ for _ in ()).throw(DataError("x")))()
    assert info.value.code == 1


def test_sdf_build_toy_warm_cache(runner, toy_cfg_path, tmp_path):
    args = ["--config", toy_cfg_path, "--out", tmp_path / "out", "sdf", "build"]
    result = _run(runner, args)
    assert result.exit_code == 0
    assert "1/1 caches ready" in result.output
    again = _run(runner, args)
    assert again.exit_code == 0
    assert "cached" in again.output


def test_sdf_build_cold_then_warm(runner, toy_cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("PREGRASP_CACHE_DIR", str(tmp_path / "cache"))
    args = ["--config", toy_cfg_path, "--out", tmp_path / "out", "sdf", "build"]
    result = _run(runner, args)
    assert result.exit_code == 0
    assert "built in" in result.output
    assert len(list((tmp_path / "cache").glob("*.sdf"))) == 1
    again = _run(runner, args)
    assert "cached" in again.output


def test_sdf_build_reports_bad_mesh(runner, tmp_path):
    bad = tmp_path / "objects"
    bad.mkdir()
    src = data_path("toy_objects")
    shutil.copy(src / "box.json", bad / "box.json")
    (bad / "box.obj").write_text("not a mesh\n")
    result = _run(runner, ["--out", tmp_path / "out",
                           "sdf", "build", "--dataset", bad])
    assert result.exit_code == 1
    assert "FAILED" in result.output


def test_rollout_scripted_deterministic(runner, toy_cfg_path, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = _run(runner, ["--config", toy_cfg_path, "--seed", 7,
                               "--out", out, "rollout",
                               "--policy", "scripted", "--episodes", 3])
        assert result.exit_code == 0
        outs.append((out / "rollout.csv").read_bytes())
    assert outs[0] == outs[1]
    lines = outs[0].decode().strip().splitlines()
    assert lines[0].startswith("episode,step,")
    assert lines[0].endswith("done,reason")
    terminal = [l for l in lines[1:] if l.split(",")[-2] == "1"]
    assert len(terminal) == 3
    for line in terminal:
        assert line.split(",")[-1] in ("target", "off-table", "timeout")


def test_rollout_random_policy(runner, toy_cfg_path, tmp_path):
    result = _run(runner, ["--config", toy_cfg_path, "--out", tmp_path,
                           "rollout", "--policy", "random", "--episodes", 2])
    assert result.exit_code == 0
    assert "episodes 2" in result.output


def test_rollout_missing_checkpoint_is_usage_error(runner, toy_cfg_path, tmp_path):
    result = _run(runner, ["--config", toy_cfg_path, "--out", tmp_path,
                           "rollout", "--policy", "checkpoint",
                           "--checkpoint", tmp_path / "nope.bin"])
    assert result.exit_code == 2


def test_train_eval_report_cycle(runner, toy_cfg_path, tmp_path):
    out = tmp_path / "run"
    result = _run(runner, ["--config", toy_cfg_path, "--seed", 1,
                           "--out", out, "train"])
    assert result.exit_code == 0
    assert (out / "metrics.csv").exists()
    assert (out / "checkpoint.bin").exists()
    assert (out / "training_curve.svg").exists()

    result = _run(runner, ["--config", toy_cfg_path, "--seed", 2, "--out", out,
                           "eval", "--checkpoint", out / "checkpoint.bin",
                           "--attempts", 2, "--batch", 4])
    assert result.exit_code == 0
    assert (out / "eval.csv").exists()
    assert (out / "eval_rates.svg").exists()
    assert "overall" in result.output

    (out / "training_curve.svg").unlink()
    result = _run(runner, ["--out", out, "report"])
    assert result.exit_code == 0
    assert (out / "training_curve.svg").exists()


def test_train_resume_flag(runner, toy_cfg_path, tmp_path):
    out = tmp_path / "run"
    _run(runner, ["--config", toy_cfg_path, "--out", out, "train"])
    result = _run(runner, ["--config", toy_cfg_path, "--out", out, "train",
                           "--resume", out / "checkpoint.bin",
                           "--total-steps", 96])
    assert result.exit_code == 0


def test_eval_missing_checkpoint(runner, toy_cfg_path, tmp_path):
    result = _run(runner, ["--config", toy_cfg_path, "--out", tmp_path,
                           "eval", "--checkpoint", tmp_path / "none.bin"])
    assert result.exit_code == 2


def test_ablate_smoke_emits_curves(runner, toy_cfg_path, tmp_path):
    out = tmp_path / "run"
    result = _run(runner, ["--config", toy_cfg_path, "--out", out,
                           "ablate", "--seeds", 1, "--budget", 32])
    assert result.exit_code == 0
    for name in VARIANTS:
        assert (out / "ablate" / f"{name}.svg").exists()
        assert (out / "ablate" / name / "seed0" / "metrics.csv").exists()
    assert (out / "ablate" / "ablation.csv").exists()
    assert (out / "ablate" / "ablation_overview.svg").exists()

    report = _run(runner, ["--out", out, "report"])
    assert report.exit_code == 0


def test_ablate_unknown_variant(runner, toy_cfg_path, tmp_path):
    result = _run(runner, ["--config", toy_cfg_path, "--out", tmp_path,
                           "ablate", "--seeds", 1, "--budget", 32,
                           "--variants", "bogus"])
    assert result.exit_code == 2


def test_report_empty_dir_fails(runner, tmp_path):
    result = _run(runner, ["--out", tmp_path / "empty", "report"])
    assert result.exit_code == 1


def test_evaluate_counts_and_aggregates(toy_cfg_path, tmp_path):
    from pregrasp.learner import Trainer

    cfg = load_config(toy_cfg_path)
    trainer = Trainer(cfg, seed=0, out_dir=None)
    trainer.run_iteration()
    ck = tmp_path / "ck.bin"
    trainer.save_checkpoint(ck)
    report = evaluate(cfg, ck, attempts=3, seed=5, batch=4)
    assert len(report.objects) == 1
    name, cat, attempts, successes = report.objects[0]
    assert attempts == 3
    assert 0 <= successes <= attempts
    n, s = report.overall()
    assert (n, s) == (attempts, successes)
    assert sum(report.reason_counts.values()) == attempts
    csv_path = tmp_path / "eval.csv"
    report.write_csv(csv_path)
    text = csv_path.read_text()
    assert text.startswith("kind,name,category,attempts,successes,rate,ci_lo,ci_hi")
    assert "overall" in text
    table = report.table()
    assert "== overall" in table

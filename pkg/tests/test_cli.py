import csv
import json
from pathlib import Path

import pytest

from oirl.cli import main
from oirl.config import RunConfig


def write_config(tmp_path, **overrides):
    cfg = RunConfig(
        env_name="lava_crossing_middle",
        env_size=5,
        n_options=2,
        seeds=[0],
        iterations=1,
        n_demos=5,
        steps_per_iter=64,
        expert_batch=32,
        policy_hidden=(16,),
        disc_hidden=(16, 16),
        eval_episodes=2,
        out_dir=str(tmp_path / "runs"),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    path = tmp_path / "config.json"
    path.write_text(cfg.to_json())
    return cfg, path


def run_dir(cfg):
    return Path(cfg.out_dir) / f"{cfg.env_name}_{cfg.hash()}"


def test_expert_writes_demos_and_stats(tmp_path):
    cfg, cfg_path = write_config(tmp_path)
    assert main(["expert", "--config", str(cfg_path)]) == 0
    d = run_dir(cfg)
    assert (d / "demos.jsonl").exists()
    stats = json.loads((d / "expert_stats.json").read_text())
    assert stats["n_trajectories"] == 5
    assert stats["config_hash"] == cfg.hash()
    assert stats["mean_return"] > 0.0


def test_expert_is_idempotent_without_force(tmp_path):
    cfg, cfg_path = write_config(tmp_path)
    main(["expert", "--config", str(cfg_path)])
    demo = run_dir(cfg) / "demos.jsonl"
    mtime = demo.stat().st_mtime_ns
    main(["expert", "--config", str(cfg_path)])
    assert demo.stat().st_mtime_ns == mtime
    main(["expert", "--config", str(cfg_path), "--force"])
    assert demo.stat().st_mtime_ns >= mtime


def test_unknown_env_rejected(tmp_path):
    cfg, cfg_path = write_config(tmp_path)
    text = cfg_path.read_text().replace("lava_crossing_middle", "volcano")
    cfg_path.write_text(text)
    with pytest.raises(ValueError):
        main(["expert", "--config", str(cfg_path)])


def test_train_requires_demos(tmp_path):
    cfg, cfg_path = write_config(tmp_path)
    assert main(["train", "--config", str(cfg_path)]) == 2


def test_train_smoke_and_transfer(tmp_path):
    cfg, cfg_path = write_config(tmp_path)
    assert main(["expert", "--config", str(cfg_path)]) == 0
    assert main(["train", "--config", str(cfg_path)]) == 0
    d = run_dir(cfg)
    seed_dir = d / "seed_0"
    assert (seed_dir / "metrics.csv").exists()
    assert (seed_dir / "checkpoint_final" / "options.npz").exists()
    assert (d / "config.json").exists()

    assert main(["transfer", "--config", str(cfg_path)]) == 0
    with open(d / "transfer.csv") as fh:
        header = fh.readline()
        assert cfg.hash() in header
        rows = list(csv.DictReader(fh))
    assert {r["mode"] for r in rows} == {"stochastic", "greedy"}
    with open(d / "transfer_summary.csv") as fh:
        fh.readline()
        summary = list(csv.DictReader(fh))
    assert summary[0]["n_seeds"] == "1"
    assert set(summary[0]) == {"task", "n_options", "mode", "mean", "std", "n_seeds"}


def test_train_skips_existing_seed_without_force(tmp_path):
    cfg, cfg_path = write_config(tmp_path)
    main(["expert", "--config", str(cfg_path)])
    main(["train", "--config", str(cfg_path)])
    metrics = run_dir(cfg) / "seed_0" / "metrics.csv"
    mtime = metrics.stat().st_mtime_ns
    main(["train", "--config", str(cfg_path)])
    assert metrics.stat().st_mtime_ns == mtime


def test_seed_override(tmp_path):
    cfg, cfg_path = write_config(tmp_path)
    main(["expert", "--config", str(cfg_path)])
    main(["train", "--config", str(cfg_path), "--seed-override", "3"])
    assert (run_dir(cfg) / "seed_3" / "metrics.csv").exists()


def test_transfer_missing_checkpoint_errors(tmp_path):
    cfg, cfg_path = write_config(tmp_path)
    assert main(["transfer", "--config", str(cfg_path)]) == 2


def test_verify_exit_codes(tmp_path, monkeypatch):
    monkeypatch.setenv("OIRL_OUT", str(tmp_path / "v"))
    cfg, cfg_path = write_config(tmp_path)
    assert main(["verify", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "v" / "verification" / "verification_summary.csv").exists()
    assert main(["verify", "--config", str(cfg_path), "--inject-negated-reward"]) == 1


def test_oirl_out_overrides_root(tmp_path, monkeypatch):
    monkeypatch.setenv("OIRL_OUT", str(tmp_path / "elsewhere"))
    cfg, cfg_path = write_config(tmp_path)
    main(["expert", "--config", str(cfg_path)])
    d = Path(tmp_path / "elsewhere") / f"{cfg.env_name}_{cfg.hash()}"
    assert (d / "demos.jsonl").exists()
    assert not run_dir(cfg).exists()

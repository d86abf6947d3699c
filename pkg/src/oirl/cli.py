"""Command-line entry point: expert demos, training, transfer, verification.

Every command is idempotent with respect to existing outputs unless --force,
and every artifact carries the config hash in its header or directory name.
OIRL_OUT overrides the output root from the config.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig, build_env_spec
from .grids import GridEnv, flower_maze_pair, lava_crossing_pair
from .options import NeuralOptionSet
from .rollout import make_expert_tabular, read_demos, sample_demos, write_demos
from .trainer import evaluate_policy, train
from .verify import run_verification_suite


def _out_root(config: RunConfig) -> Path:
    return Path(os.environ.get("OIRL_OUT", config.out_dir))


def _run_dir(config: RunConfig) -> Path:
    return _out_root(config) / f"{config.env_name}_{config.hash()}"


def _load_config(args) -> RunConfig:
    if args.config is not None:
        config = RunConfig.from_json(Path(args.config).read_text())
    else:
        config = RunConfig()
    if getattr(args, "seed_override", None) is not None:
        config.seeds = [int(s) for s in args.seed_override.split(",")]
    config.validate()
    return config


def cmd_expert(args) -> int:
    config = _load_config(args)
    run_dir = _run_dir(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    demo_path = run_dir / "demos.jsonl"
    if demo_path.exists() and not args.force:
        print(f"demos already at {demo_path} (use --force to regenerate)")
        return 0
    spec = build_env_spec(config.env_name, config.env_size)
    env = GridEnv(spec)
    expert = make_expert_tabular(env.mdp)
    rng = np.random.default_rng(config.seeds[0])
    demos = sample_demos(expert, env, config.n_demos, rng)
    write_demos(demo_path, demos)
    goal_idx = env.cell_index[spec.goal]
    returns = [
        (1.0 - 0.9 * tr[-1].n_next / spec.n_max) if tr[-1].s_next == goal_idx else 0.0
        for tr in demos.trajectories
    ]
    stats = {
        "config_hash": config.hash(),
        "env": config.env_name,
        "n_trajectories": len(demos.trajectories),
        "mean_return": float(np.mean(returns)),
        "mean_length": float(np.mean([len(tr) for tr in demos.trajectories])),
        "value_iteration_residual": expert.residual,
    }
    (run_dir / "expert_stats.json").write_text(json.dumps(stats, indent=2))
    print(f"wrote {len(demos.trajectories)} demonstrations to {demo_path}")
    return 0


def _train_one_seed(config: RunConfig, demos, seed: int, run_dir: Path, force: bool) -> Path:
    seed_dir = run_dir / f"seed_{seed}"
    metrics = seed_dir / "metrics.csv"
    if metrics.exists() and not force:
        print(f"seed {seed}: metrics already at {metrics}, skipping")
        return seed_dir
    seed_dir.mkdir(parents=True, exist_ok=True)
    train(config, demos, seed, out_dir=seed_dir)
    print(f"seed {seed}: finished {config.iterations} iterations -> {metrics}")
    return seed_dir


def cmd_train(args) -> int:
    config = _load_config(args)
    run_dir = _run_dir(config)
    demo_path = run_dir / "demos.jsonl"
    demos = None
    if not config.self_imitation:
        if not demo_path.exists():
            print(f"error: no demo file at {demo_path}; run the expert command first", file=sys.stderr)
            return 2
        demos = read_demos(demo_path)
    (run_dir / "config.json").write_text(config.to_json())
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            futures = [
                pool.submit(_train_one_seed, config, demos, s, run_dir, args.force)
                for s in config.seeds
            ]
            for f in futures:
                f.result()
    else:
        for s in config.seeds:
            _train_one_seed(config, demos, s, run_dir, args.force)
    return 0


def _transfer_pair(name: str, size: int):
    if name.startswith("lava_crossing"):
        return lava_crossing_pair(size)
    return flower_maze_pair(max(size, 7))


def cmd_transfer(args) -> int:
    config = _load_config(args)
    run_dir = _run_dir(config)
    pair = _transfer_pair(config.env_name, config.env_size)
    pair.validate()
    out_path = run_dir / "transfer.csv"
    if out_path.exists() and not args.force:
        print(f"transfer report already at {out_path} (use --force)")
        return 0
    test_env = GridEnv(pair.test_env)
    rows = []
    for seed in config.seeds:
        ckpt = run_dir / f"seed_{seed}" / "checkpoint_final" / "options"
        if not ckpt.with_suffix(".json").exists():
            print(f"error: missing checkpoint for seed {seed} at {ckpt}", file=sys.stderr)
            return 2
        opts = NeuralOptionSet.load(ckpt)
        rng = np.random.default_rng(10_000 + seed)
        for mode in ("stochastic", "greedy"):
            mean, std = evaluate_policy(opts, test_env, config.eval_episodes, rng, mode=mode)
            rows.append(
                {
                    "task": pair.name,
                    "n_options": config.n_options,
                    "seed": seed,
                    "mode": mode,
                    "mean": mean,
                    "std": std,
                }
            )
    with open(out_path, "w", newline="") as fh:
        fh.write(f"# schema_version=1 config_hash={config.hash()}\n")
        writer = csv.DictWriter(fh, fieldnames=["task", "n_options", "seed", "mode", "mean", "std"])
        writer.writeheader()
        writer.writerows(rows)
    # aggregate table: one row per (mode, n_options)
    agg_path = run_dir / "transfer_summary.csv"
    with open(agg_path, "w", newline="") as fh:
        fh.write(f"# schema_version=1 config_hash={config.hash()}\n")
        writer = csv.DictWriter(fh, fieldnames=["task", "n_options", "mode", "mean", "std", "n_seeds"])
        writer.writeheader()
        for mode in ("stochastic", "greedy"):
            vals = [r["mean"] for r in rows if r["mode"] == mode]
            writer.writerow(
                {
                    "task": pair.name,
                    "n_options": config.n_options,
                    "mode": mode,
                    "mean": float(np.mean(vals)),
                    "std": float(np.std(vals)),
                    "n_seeds": len(config.seeds),
                }
            )
    print(f"wrote transfer report to {out_path}")
    return 0


def cmd_verify(args) -> int:
    config = _load_config(args)
    out_dir = _out_root(config) / "verification"
    results = run_verification_suite(
        out_dir=out_dir, negate_recovery_reward=args.inject_negated_reward
    )
    failures = [r for r in results if r.status == "fail"]
    for r in results:
        print(f"{r.status:8s} {r.name:32s} {r.value:.6g}")
    if failures:
        print(f"{len(failures)} verification check(s) failed", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oirl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("expert", cmd_expert),
        ("train", cmd_train),
        ("transfer", cmd_transfer),
        ("verify", cmd_verify),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="path to a run-config JSON file")
        p.add_argument("--seed-override", default=None, help="comma-separated seed list")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--threads", type=int, default=1, help="parallel seed workers")
        if name == "verify":
            p.add_argument(
                "--inject-negated-reward",
                action="store_true",
                help="plant g = -r* to exercise the recovery-failure path",
            )
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

"""Experiment configuration: JSON round-trip and hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .discriminator import RecursiveLossConfig
from .ppoc import PPOCConfig

ENV_NAMES = (
    "lava_crossing_middle",
    "lava_crossing_right",
    "flower_maze_right",
    "flower_maze_top",
)


@dataclass
class RunConfig:
    env_name: str = "lava_crossing_middle"
    env_size: int = 8
    n_options: int = 4
    seeds: list = field(default_factory=lambda: [0])
    iterations: int = 300
    n_demos: int = 50
    disc_mode: str = "state_only"
    steps_per_iter: int = 512
    expert_batch: int = 256
    policy_hidden: tuple = (64, 64)
    disc_hidden: tuple = (150, 150, 150)
    weight_clip: tuple = (0.1, 10.0)
    eval_episodes: int = 20
    eval_every: int = 10
    self_imitation: bool = False
    out_dir: str = "runs"
    ppoc: PPOCConfig = field(default_factory=PPOCConfig)
    recursive: RecursiveLossConfig = field(default_factory=RecursiveLossConfig)

    def validate(self) -> None:
        if self.n_options < 1:
            raise ValueError("n_options must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.env_name not in ENV_NAMES:
            raise ValueError(f"unknown env {self.env_name!r}; choose from {ENV_NAMES}")
        if self.disc_mode not in ("state_only", "state_action"):
            raise ValueError("disc_mode must be state_only or state_action")
        self.ppoc.validate()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2, default=list)

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        d = json.loads(text)
        ppoc = PPOCConfig(**d.pop("ppoc", {}))
        recursive = RecursiveLossConfig(**d.pop("recursive", {}))
        cfg = RunConfig(**d, ppoc=ppoc, recursive=recursive)
        cfg.policy_hidden = tuple(cfg.policy_hidden)
        cfg.disc_hidden = tuple(cfg.disc_hidden)
        cfg.weight_clip = tuple(cfg.weight_clip)
        return cfg

    def hash(self) -> str:
        """Digest of everything except the seed list (seeds own subdirectories)."""
        d = asdict(self)
        d.pop("seeds", None)
        payload = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]


def build_env_spec(env_name: str, size: int):
    from .grids import build_flower_maze, build_lava_crossing

    if env_name == "lava_crossing_middle":
        return build_lava_crossing("middle", size)
    if env_name == "lava_crossing_right":
        return build_lava_crossing("right", size)
    if env_name == "flower_maze_right":
        return build_flower_maze("right", max(size, 7))
    if env_name == "flower_maze_top":
        return build_flower_maze("top", max(size, 7))
    raise ValueError(f"unknown env {env_name!r}")

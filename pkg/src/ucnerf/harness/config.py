"""Training configuration: a flat JSON file whose keys match :class:`TrainConfig` fields."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..distill import LossWeights
from ..field import FUSION_MODES

SEED_ENV = "UCNERF_SEED"

# Named override sets. "fast" keeps a 5000-iteration reference run under
# 30 minutes on a single CPU core (about 0.3 s per iteration).
PROFILES = {
    "desk": {},
    "fast": {"ray_batch": 160, "sparse_rays": 32, "patch_batch": 6, "samples_per_ray": 48, "trunk_width": 64,
             "stage_planes": (32, 16, 8)},
}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 6e-4
    lr_final_ratio: float = 0.1
    iters: int = 5000
    ray_batch: int = 1024
    sparse_rays: int = 128
    patch_batch: int = 50
    patch_size: int = 6
    samples_per_ray: int = 90
    n_source_views: int = 7
    stage_planes: tuple = (48, 32, 8)
    stage_weights: tuple = (0.5, 1.0, 2.0)
    feature_channels: int = 8
    trunk_depth: int = 4
    trunk_width: int = 128
    branch_depth: int = 2
    branch_width: int = 64
    L_pos: int = 10
    L_dir: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    smooth_beta: float = 1.0
    grad_normalization: str = "mean_per_pixel"
    background: tuple = (0.0, 0.0, 0.0)
    near_far_padding: tuple = (0.9, 1.1)
    train_views: int = 0  # 0 = all training views, otherwise the first n in split order
    seed: int = 0
    use_uncertainty: bool = True
    use_adaptive_branch: bool = True
    use_distillation: bool = True
    density_fusion: str = "paper"
    log_every: int = 100
    checkpoint_every: int = 1000
    eval_chunk: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "stage_planes", tuple(int(v) for v in self.stage_planes))
        object.__setattr__(self, "stage_weights", tuple(float(v) for v in self.stage_weights))
        object.__setattr__(self, "background", tuple(float(v) for v in self.background))
        object.__setattr__(self, "near_far_padding", tuple(float(v) for v in self.near_far_padding))
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        self.validate()

    def validate(self) -> None:
        positive = ("lr", "ray_batch", "samples_per_ray", "n_source_views", "feature_channels", "trunk_depth",
                    "trunk_width", "branch_depth", "branch_width", "smooth_beta", "log_every",
                    "checkpoint_every", "eval_chunk", "patch_size")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"config field {name} must be positive, got {getattr(self, name)}")
        for name in ("iters", "patch_batch", "sparse_rays", "L_pos", "L_dir", "train_views", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"config field {name} must be non-negative, got {getattr(self, name)}")
        if not 0 < self.lr_final_ratio <= 1:
            raise ValueError("lr_final_ratio must lie in (0, 1]")
        if self.sparse_rays > self.ray_batch:
            raise ValueError("sparse_rays cannot exceed ray_batch")
        if len(self.stage_planes) != 3 or min(self.stage_planes) < 2:
            raise ValueError("stage_planes needs three counts >= 2")
        if self.density_fusion not in FUSION_MODES:
            raise ValueError(f"density_fusion must be one of {FUSION_MODES}")
        if self.grad_normalization != "mean_per_pixel":
            raise ValueError("only grad_normalization='mean_per_pixel' is implemented")
        for name in ("use_uncertainty", "use_adaptive_branch", "use_distillation"):
            if not isinstance(getattr(self, name), bool):
                raise ValueError(f"{name} must be a boolean")
        lo, hi = self.near_far_padding
        if not 0 < lo <= 1 <= hi:
            raise ValueError("near_far_padding must satisfy 0 < lo <= 1 <= hi")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def profile_config(name: str = "desk", **overrides) -> TrainConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}")
    return TrainConfig(**{**PROFILES[name], **overrides})


def load_config(path=None, env=None, profile: str = "desk") -> TrainConfig:
    """Read a config file (or profile defaults) and apply the seed environment override.

    File keys override the profile's values.
    """
    env = os.environ if env is None else env
    d = {} if path is None else json.loads(Path(path).read_text())
    unknown = set(d) - {f.name for f in fields(TrainConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = profile_config(profile, **d)
    if env.get(SEED_ENV):
        cfg = cfg.with_overrides(seed=int(env[SEED_ENV]))
    return cfg


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

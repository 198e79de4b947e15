"""Ablation experiments and a result cache keyed by config, data and code."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import SceneData, prepare_scene
from .evaluation import REPORT_KEYS, evaluate_model
from .training import train

log = logging.getLogger(__name__)

AXES = ("components", "source_views", "train_size", "density_fusion")
TABLE_KEYS = ("psnr", "ssim", "abs_rel", "sq_rel", "rmse", "rmse_log", "delta_125")


RESULT_MODULES = ("camera.py", "raycore.py", "sweep.py", "field.py", "distill.py", "metrics.py", "synthscene.py",
                  "harness/config.py", "harness/data.py", "harness/model.py", "harness/training.py",
                  "harness/evaluation.py")


def source_hash() -> str:
    """Hash of the modules that determine training results.

    Cached results expire whenever any of them changes.
    """
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for name in RESULT_MODULES:
        h.update(name.encode())
        h.update((root / name).read_bytes())
    return h.hexdigest()[:16]


def variants(axis: str, base: TrainConfig, values=None) -> list[tuple[str, TrainConfig]]:
    """Labelled configurations for one ablation axis, in table row order."""
    if axis == "components":
        return [
            ("baseline", base.with_overrides(use_uncertainty=False, use_adaptive_branch=False, use_distillation=False)),
            ("+ adaptive branch", base.with_overrides(use_uncertainty=False, use_adaptive_branch=True,
                                                      use_distillation=False)),
            ("+ uncertainty", base.with_overrides(use_uncertainty=True, use_adaptive_branch=True,
                                                  use_distillation=False)),
            ("+ distillation", base.with_overrides(use_uncertainty=True, use_adaptive_branch=True,
                                                   use_distillation=True)),
        ]
    if axis == "source_views":
        return [(f"{n} views", base.with_overrides(n_source_views=int(n))) for n in (values or (3, 5, 7, 9))]
    if axis == "train_size":
        out = []
        for n in values or (4, 7, 10):
            out.append((f"{n} train views", base.with_overrides(train_views=int(n),
                                                                n_source_views=min(base.n_source_views, int(n) - 1))))
        return out
    if axis == "density_fusion":
        return [(m, base.with_overrides(density_fusion=m)) for m in (values or ("paper", "swapped"))]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def run_key(cfg: TrainConfig, fingerprint: str) -> str:
    return hashlib.sha256(f"{cfg.hash()}:{fingerprint}:{source_hash()}".encode()).hexdigest()[:20]


def cached_run(data, cfg: TrainConfig, cache_dir=None, split: str = "test") -> dict:
    """Train and evaluate ``cfg`` once; later calls with identical inputs reuse the result.

    The returned record holds the summary, per-view metrics, loss curve and
    wall-clock times.
    """
    source = data.dataset if isinstance(data, SceneData) else data
    scene = prepare_scene(source, cfg.train_views, cfg.near_far_padding)
    key = run_key(cfg, scene.fingerprint)
    path = Path(cache_dir) / f"{key}.json" if cache_dir is not None else None
    if path is not None and path.exists():
        return json.loads(path.read_text())
    result = train(scene, cfg)
    report = evaluate_model(result.model, scene, split)
    record = {"key": key, "config": cfg.to_dict(), "config_hash": cfg.hash(), "dataset": scene.fingerprint,
              "summary": report.summary, "per_view": report.per_view, "curve": result.curve,
              "train_seconds": result.wall_clock, "eval_seconds": report.wall_clock}
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record, indent=1, sort_keys=True))
    return record


@dataclass
class AblationReport:
    axis: str
    rows: list = field(default_factory=list)  # (label, {metric: median over seeds}, [records])

    def table(self) -> str:
        head = f"{'variant':<22}" + "".join(f"{k:>10}" for k in TABLE_KEYS)
        lines = [f"ablation: {self.axis}", head]
        for label, med, _ in self.rows:
            lines.append(f"{label:<22}" + "".join(f"{med[k]:>10.4f}" for k in TABLE_KEYS))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"axis": self.axis, "rows": [{"variant": l, "median": m, "runs": r} for l, m, r in self.rows]}


def run_ablation(data, base_cfg: TrainConfig, axis: str, seeds=None, values=None, cache_dir=None,
                 out_dir=None) -> AblationReport:
    """Train every variant of ``axis`` for each seed; rows report medians over seeds."""
    seeds = list(seeds) if seeds else [base_cfg.seed]
    report = AblationReport(axis)
    for label, cfg in variants(axis, base_cfg, values):
        records = []
        for s in seeds:
            log.info("ablation %s: %s seed %d", axis, label, s)
            records.append(cached_run(data, cfg.with_overrides(seed=int(s)), cache_dir))
        med = {k: float(np.median([r["summary"][k]["mean"] for r in records])) for k in REPORT_KEYS}
        report.rows.append((label, med, records))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_{axis}.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
        (out / f"ablation_{axis}.txt").write_text(report.table())
    return report


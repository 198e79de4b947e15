"""Evaluation: render held-out views, compute metrics, write outputs and a report."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import metrics
from ..io import read_json, write_json, write_pfm, write_png
from .checkpoint import load_checkpoint
from .config import TrainConfig
from .data import SceneData, prepare_scene
from .model import UCNeRF

REPORT_KEYS = metrics.IMAGE_KEYS + metrics.DEPTH_KEYS


class CompatibilityError(ValueError):
    """Checkpoint and dataset/config do not belong together."""


@dataclass
class ExperimentReport:
    split: str
    per_view: list
    summary: dict
    config_hash: str
    dataset: str
    wall_clock: float = 0.0
    loss_curve: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"split": self.split, "per_view": self.per_view, "summary": self.summary,
                "config_hash": self.config_hash, "dataset": self.dataset, "wall_clock_s": self.wall_clock,
                "loss_curve": self.loss_curve}

    def table(self) -> str:
        return metrics.format_table(self.per_view, self.summary, REPORT_KEYS)

    def mean(self, key: str) -> float:
        return self.summary[key]["mean"]


def view_metrics(rendered: dict, image: np.ndarray, gt_depth: np.ndarray) -> dict:
    depth = metrics.evaluate_depth(rendered["depth"], gt_depth)
    return {"psnr": metrics.psnr(np.clip(rendered["color"], 0, 1), image),
            "ssim": metrics.ssim(np.clip(rendered["color"], 0, 1), image), **depth.to_dict()}


def evaluate_model(model: UCNeRF, scene: SceneData, split: str = "test", out_dir=None) -> ExperimentReport:
    """Render every view of ``split`` and compute per-view and aggregate metrics."""
    views = scene.test if split == "test" else scene.train
    if not views:
        raise ValueError(f"split {split!r} has no views")
    t0 = time.perf_counter()
    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        for sub in ("images", "depth", "uncertainty"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    model.eval()
    for v in views:
        r = model.render_view(scene, v)
        row = {"view": int(v), **view_metrics(r, np.asarray(scene.dataset.views.images[v]),
                                                np.asarray(scene.dataset.views.gt_depth[v]))}
        rows.append(row)
        if out is not None:
            write_png(out / "images" / f"{v:04d}.png", np.clip(r["color"], 0, 1))
            write_pfm(out / "depth" / f"{v:04d}.pfm", r["depth"])
            write_pfm(out / "uncertainty" / f"{v:04d}.pfm", r["uncertainty"])
    model.train()
    summary = metrics.aggregate(rows, REPORT_KEYS)
    report = ExperimentReport(split, rows, summary, model.cfg.hash(), scene.fingerprint,
                              time.perf_counter() - t0)
    if out is not None:
        write_json(out / "report.json", report.to_dict())
        (out / "report.txt").write_text(report.table())
    return report


def load_run(run_dir, data=None) -> tuple[UCNeRF, SceneData, dict]:
    """Rebuild the model of a training run and check it against its dataset."""
    run = Path(run_dir)
    cfg = TrainConfig.from_dict(read_json(run / "config.json"))
    info = read_json(run / "run.json")
    data = data if data is not None else info.get("data")
    if data is None or isinstance(data, list):
        raise ValueError("run does not record a single dataset; pass it explicitly")
    scene = prepare_scene(data, cfg.train_views, cfg.near_far_padding)
    model = UCNeRF(cfg)
    meta = load_checkpoint(run / "checkpoint.npz", model)
    check_compatible(meta, cfg, scene)
    return model, scene, meta


def check_compatible(meta: dict, cfg: TrainConfig, scene: SceneData) -> None:
    if meta.get("config_hash") != cfg.hash():
        raise CompatibilityError(
            f"checkpoint config hash {meta.get('config_hash')} does not match config {cfg.hash()}")
    # multi-scene runs record every fingerprint joined by '+'
    if scene.fingerprint not in str(meta.get("dataset", "")).split("+"):
        raise CompatibilityError(
            f"checkpoint was trained on dataset {meta.get('dataset')}, not {scene.fingerprint}")


def evaluate(run_dir, split: str = "test", data=None, out_dir=None) -> ExperimentReport:
    model, scene, _ = load_run(run_dir, data)
    out = Path(out_dir) if out_dir is not None else Path(run_dir) / f"eval_{split}"
    report = evaluate_model(model, scene, split, out)
    curve = Path(run_dir) / "loss_curve.csv"
    if curve.exists():
        from .training import read_curve

        report.loss_curve = read_curve(curve)
        write_json(out / "report.json", report.to_dict())
    return report

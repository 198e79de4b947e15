"""Training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import distill
from ..sweep import consistency_loss
from .checkpoint import save_checkpoint
from .config import TrainConfig, save_config
from .data import SceneData, prepare_scene
from .model import UCNeRF

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("iter", "total", "rgb", "con", "scale", "grad", "reg")


def cosine_lr(cfg: TrainConfig, it: int) -> float:
    """Cosine decay from ``lr`` to ``lr * lr_final_ratio`` over ``iters``."""
    if cfg.iters <= 1:
        return cfg.lr
    frac = min(it / (cfg.iters - 1), 1.0)
    r = cfg.lr_final_ratio
    return cfg.lr * (r + (1 - r) * 0.5 * (1 + math.cos(math.pi * frac)))


def build_model(cfg: TrainConfig) -> UCNeRF:
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return UCNeRF(cfg)


def make_optimizer(model: UCNeRF, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr)


@dataclass
class TrainResult:
    model: UCNeRF
    curve: list = field(default_factory=list)  # rows of CURVE_COLUMNS
    skipped_patches: int = 0
    wall_clock: float = 0.0
    checkpoint: Path | None = None


def _patch_pixels(patches) -> np.ndarray:
    if not patches:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate([p.pixels() for p in patches])


def training_step(model: UCNeRF, scene: SceneData, cfg: TrainConfig, rng: np.random.Generator,
                  gen: torch.Generator) -> tuple[torch.Tensor, dict, int]:
    """One forward pass; returns (total loss, component values, skipped patches)."""
    view = int(rng.choice(scene.train))
    vc = model.condition(scene, view)
    h, w = scene.height, scene.width
    sparse = scene.dataset.sparse[view]

    # random rays plus a subset of the view's SfM pixels
    n_sp = min(cfg.sparse_rays if cfg.use_distillation else 0, len(sparse))
    sp_idx = np.sort(rng.choice(len(sparse), size=n_sp, replace=False)) if n_sp else np.zeros(0, dtype=np.int64)
    flat = rng.integers(0, h * w, size=cfg.ray_batch - n_sp)
    rand_pix = np.stack([flat % w, flat // w], axis=-1)
    sp_pix = np.stack([sparse.u[sp_idx], sparse.v[sp_idx]], axis=-1)
    pixels = [rand_pix, sp_pix]

    high, low = [], []
    if cfg.use_distillation and cfg.patch_batch:
        high, low = distill.partition_patches(vc.uncertainty.detach(), rng, cfg.patch_batch, cfg.patch_size)
        pixels += [_patch_pixels(high), _patch_pixels(low)]
    counts = [len(p) for p in pixels]
    out = model.render(vc, scene, np.concatenate(pixels), generator=gen)
    colors = torch.split(out.color, counts)
    depths = torch.split(out.depth, counts)

    target = scene.images[vc.view].permute(1, 2, 0)
    all_pix = np.concatenate(pixels[:2])
    gt = target[torch.as_tensor(all_pix[:, 1]), torch.as_tensor(all_pix[:, 0])]
    comps = {"rgb": distill.rgb_loss(torch.cat(colors[:2]), gt)}
    comps["con"] = consistency_loss(vc.cascade.depths, sparse, w, h, cfg.stage_weights)
    skipped = 0
    zero = out.color.new_zeros(())
    comps["scale"] = comps["grad"] = comps["reg"] = zero
    if cfg.use_distillation:
        if n_sp:
            comps["scale"] = distill.scale_loss(depths[1], sparse.depth[sp_idx], sparse.omega[sp_idx],
                                                omega_bar=sparse.omega_bar)
        prior = torch.as_tensor(scene.dataset.prior[view].depth, dtype=out.depth.dtype)
        s = cfg.patch_size
        if high:
            pp = _patch_pixels(high)
            d_prior = prior[torch.as_tensor(pp[:, 1]), torch.as_tensor(pp[:, 0])].reshape(-1, s, s)
            comps["grad"], skipped = distill.grad_loss(depths[2].reshape(-1, s, s), d_prior)
        if low:
            pp = _patch_pixels(low)
            d_prior = prior[torch.as_tensor(pp[:, 1]), torch.as_tensor(pp[:, 0])].reshape(-1, s, s)
            comps["reg"] = distill.smooth_loss(depths[3].reshape(-1, s, s), d_prior,
                                               distill.SmoothnessConfig(cfg.smooth_beta), scale=scene.far)
    try:
        total = distill.total_loss(comps, cfg.weights)
    except distill.NonFiniteLossError as e:
        e.components = {k: float(v.detach()) for k, v in comps.items()}
        raise
    return total, comps, skipped


def _as_scene(data, cfg: TrainConfig) -> SceneData:
    return data if isinstance(data, SceneData) else prepare_scene(data, cfg.train_views, cfg.near_far_padding)


def train(data, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Train a model on ``data`` (dataset, directory or prepared scene).

    A list of scenes selects multi-scene mode: each iteration first draws a
    scene uniformly, then a target view within it, so one model is shared
    across scenes. With ``out_dir`` the config, loss curve, periodic and
    final checkpoints and a run summary are written there.
    """
    multi = isinstance(data, (list, tuple))
    scenes = [_as_scene(d, cfg) for d in data] if multi else [_as_scene(data, cfg)]
    if not scenes:
        raise ValueError("multi-scene training needs at least one scene")
    model = build_model(cfg)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    meta = {"config_hash": cfg.hash(), "dataset": "+".join(s.fingerprint for s in scenes),
            "near": min(s.near for s in scenes), "far": max(s.far for s in scenes)}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.json")

    result = TrainResult(model)
    window = {k: 0.0 for k in CURVE_COLUMNS[1:]}
    n_window = 0
    t0 = time.perf_counter()
    for it in range(cfg.iters):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(cfg, it)
        scene = scenes[int(rng.integers(len(scenes)))] if multi else scenes[0]
        try:
            loss, comps, skipped = training_step(model, scene, cfg, rng, gen)
        except distill.NonFiniteLossError as e:
            comps = getattr(e, "components", {})
            dump = {k: float(v) for k, v in comps.items()}
            if out is not None:
                (out / "diagnostics.json").write_text(json.dumps({"iter": it, "components": dump}, indent=2))
            raise FloatingPointError(f"non-finite loss at iteration {it}: {e}; components {dump}") from e
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        result.skipped_patches += skipped
        window["total"] += float(loss.detach())
        for k, v in comps.items():
            window[k] += float(v.detach())
        n_window += 1
        if it == 0 or (it + 1) % cfg.log_every == 0 or it == cfg.iters - 1:
            row = [it] + [window[k] / n_window for k in CURVE_COLUMNS[1:]]
            result.curve.append(row)
            log.info("iter %d total %.5f rgb %.5f con %.5f", it, row[1], row[2], row[3])
            window = {k: 0.0 for k in window}
            n_window = 0
        if out is not None and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_{it + 1:06d}.npz", model, opt, {**meta, "iteration": it + 1})
    result.wall_clock = time.perf_counter() - t0

    if out is not None:
        write_curve(out / "loss_curve.csv", result.curve)
        result.checkpoint = out / "checkpoint.npz"
        save_checkpoint(result.checkpoint, model, opt, {**meta, "iteration": cfg.iters})
        summary = {**meta, "iters": cfg.iters, "wall_clock_s": result.wall_clock,
                   "skipped_patches": result.skipped_patches, "data": _data_ref(data)}
        (out / "run.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


def _data_ref(data):
    if isinstance(data, (list, tuple)):
        return [_data_ref(d) for d in data]
    return str(Path(data).resolve()) if isinstance(data, (str, Path)) else None


def write_curve(path, rows) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(CURVE_COLUMNS)
        for r in rows:
            wr.writerow([r[0]] + [repr(float(v)) for v in r[1:]])


def read_curve(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return [[int(r[0])] + [float(v) for v in r[1:]] for r in rows]

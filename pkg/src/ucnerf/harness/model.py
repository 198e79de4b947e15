"""The full model: cascade consistency learner plus dual-branch field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .. import raycore
from ..field import ConditionContext, FieldConfig, RadianceField, RenderOutput, render_rays
from ..raycore import EncodingConfig, RayBundle
from ..sweep import Cascade, CascadeOutput, DepthHypothesisGrid, run_cascade
from .config import TrainConfig
from .data import SceneData


def field_config(cfg: TrainConfig) -> FieldConfig:
    z = cfg.feature_channels
    return FieldConfig(
        n_views=cfg.n_source_views,
        volume_channels=(z, max(1, z // 2), max(1, z // 4)),
        color_feature_channels=max(1, z // 4),
        trunk_depth=cfg.trunk_depth,
        trunk_width=cfg.trunk_width,
        branch_depth=cfg.branch_depth,
        branch_width=cfg.branch_width,
        encoding=EncodingConfig(cfg.L_pos, cfg.L_dir, True),
    )


@dataclass
class ViewContext:
    view: int
    sources: list
    cascade: CascadeOutput
    ctx: ConditionContext
    uncertainty: torch.Tensor  # (H, W), zero when uncertainty is disabled


class UCNeRF(nn.Module):
    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        self.cascade = Cascade(cfg.feature_channels, cfg.stage_planes)
        self.field = RadianceField(field_config(cfg))

    def condition(self, scene: SceneData, view: int) -> ViewContext:
        """Run the cascade for target ``view`` using its nearest training views."""
        cfg = self.cfg
        sources = scene.sources_for(view, cfg.n_source_views)
        if len(sources) < cfg.n_source_views:
            # fewer training views than the field expects: repeat the nearest ones
            sources = (sources * cfg.n_source_views)[: cfg.n_source_views]
        cams = [scene.cameras[i] for i in sources]
        imgs = scene.images[sources]
        tgt = scene.cameras[view]
        grid = DepthHypothesisGrid(scene.near, scene.far, cfg.stage_planes)
        out = run_cascade(self.cascade, list(imgs), cams, tgt, grid)
        ctx = ConditionContext(tgt, out.volumes, out.hypotheses, imgs, torch.stack(out.source_features), cams)
        U = out.uncertainty if cfg.use_uncertainty else torch.zeros_like(out.uncertainty)
        return ViewContext(view, sources, out, ctx, U)

    def render(self, vc: ViewContext, scene: SceneData, pixels: np.ndarray, generator=None,
               perturb: bool = True) -> RenderOutput:
        """Render integer pixels (P, 2) of the conditioned view."""
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        cam = scene.cameras[vc.view]
        rays = raycore.generate_rays(cam, pixels + 0.5, scene.near, scene.far, dtype=torch.float32)
        U = vc.uncertainty[torch.as_tensor(pixels[:, 1]), torch.as_tensor(pixels[:, 0])]
        cfg = self.cfg
        return render_rays(self.field, rays, U, vc.ctx, cfg.samples_per_ray, generator, perturb, cfg.background,
                           cfg.density_fusion, cfg.use_adaptive_branch)

    @torch.no_grad()
    def render_view(self, scene: SceneData, view: int, chunk: int | None = None) -> dict:
        """Full-image render at bin midpoints: color (H, W, 3), z-depth (H, W), uncertainty (H, W)."""
        vc = self.condition(scene, view)
        cam = scene.cameras[view]
        v, u = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
        pixels = np.stack([u.ravel(), v.ravel()], axis=-1)
        chunk = chunk or self.cfg.eval_chunk
        colors, depths = [], []
        for s in range(0, len(pixels), chunk):
            out = self.render(vc, scene, pixels[s:s + chunk], perturb=False)
            colors.append(out.color)
            depths.append(out.depth)
        color = torch.cat(colors).reshape(cam.height, cam.width, 3).double().numpy()
        depth = torch.cat(depths).reshape(cam.height, cam.width).double().numpy()
        return {"color": color, "depth": depth, "uncertainty": vc.cascade.uncertainty.double().numpy(),
                "sweep_depth": vc.cascade.depths[-1].double().numpy()}

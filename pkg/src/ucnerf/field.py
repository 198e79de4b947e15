"""Dual-branch conditional radiance field.

A shared trunk consumes the encoded position and geometry/appearance
conditions gathered from the cascade volumes and the source views. A
view-independent base branch and a view-dependent adaptive branch each
predict color and density; the two are fused with the per-ray uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import raycore
from .camera import Camera
from .raycore import EncodingConfig, RayBundle, SampleBatch
from .sweep import in_view, project, sample_image, stage_factor

FUSION_MODES = ("paper", "swapped")


@dataclass(frozen=True)
class FieldConfig:
    n_views: int = 7
    volume_channels: tuple = (8, 4, 2)
    color_feature_channels: int = 2
    trunk_depth: int = 4
    trunk_width: int = 128
    branch_depth: int = 2
    branch_width: int = 64
    encoding: EncodingConfig = EncodingConfig()

    def __post_init__(self):
        for name in ("n_views", "trunk_depth", "trunk_width", "branch_depth", "branch_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def base_dim(self) -> int:
        return sum(self.volume_channels) + 4 * self.n_views

    @property
    def color_dim(self) -> int:
        return self.color_feature_channels * self.n_views


@dataclass
class ConditionContext:
    """Everything the field needs about the current target view.

    ``volumes``/``hypotheses`` come from the cascade; ``images`` (N, 3, H, W)
    and ``features`` (N, C, H, W) are the source views with their cameras.
    """

    tgt_cam: Camera
    volumes: list
    hypotheses: list
    images: torch.Tensor
    features: torch.Tensor
    cameras: list


@dataclass
class ConditionFeatures:
    f_base: torch.Tensor  # (P, base_dim)
    f_color: torch.Tensor  # (P, color_dim)


def sample_volume(volume: torch.Tensor, hyps: torch.Tensor, uv: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Trilinear sample of a frustum volume (C, D, H, W) at target coords.

    The frustum coordinates are (u / W, v / H, plane index); the continuous
    plane index is found from the per-pixel hypothesis range, so a point at
    a pixel center and exactly on a plane returns the node value.
    """
    c, d, h, w = volume.shape
    first = sample_image(hyps[:1], uv)[..., 0]
    last = sample_image(hyps[-1:], uv)[..., 0]
    idx = (z - first) / (last - first) * (d - 1)
    scale = torch.tensor([2.0 / w, 2.0 / h], dtype=uv.dtype)
    gxy = uv * scale - 1.0
    gz = (2.0 * idx + 1.0) / d - 1.0
    grid = torch.cat([gxy, gz.unsqueeze(-1)], dim=-1).reshape(1, 1, 1, -1, 3).to(volume.dtype)
    out = F.grid_sample(volume[None], grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out[0, :, 0, 0].T


def gather_condition(x: torch.Tensor, ctx: ConditionContext) -> ConditionFeatures:
    """Condition features for world points ``x`` (P, 3)."""
    uv_t, z_t = project(ctx.tgt_cam, x)
    if bool((z_t <= 0).any()):
        raise ValueError("point lies behind the target camera")
    parts = []
    for k, (vol, hyps) in enumerate(zip(ctx.volumes, ctx.hypotheses)):
        f = stage_factor(k)
        parts.append(sample_volume(vol, hyps.to(x.dtype), uv_t / f, z_t))
    colors, flags, feats = [], [], []
    for i, cam in enumerate(ctx.cameras):
        img = ctx.images[i]
        uv, z = project(cam, x)
        valid = in_view(uv, z, cam.width, cam.height).to(x.dtype).unsqueeze(-1)
        colors.append(sample_image(img, uv) * valid)
        flags.append(valid)
        fh, fw = ctx.features[i].shape[-2:]
        uv_f = uv * torch.tensor([fw / cam.width, fh / cam.height], dtype=uv.dtype)
        feats.append(sample_image(ctx.features[i], uv_f) * valid)
    f_base = torch.cat(parts + colors + flags, dim=-1)
    return ConditionFeatures(f_base=f_base, f_color=torch.cat(feats, dim=-1))


def _mlp(din: int, width: int, depth: int) -> nn.Sequential:
    layers = []
    for i in range(depth):
        layers += [nn.Linear(din if i == 0 else width, width), nn.ReLU()]
    return nn.Sequential(*layers)


class RadianceField(nn.Module):
    def __init__(self, cfg: FieldConfig = FieldConfig()):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoding
        self.trunk_net = _mlp(enc.pos_dim() + cfg.base_dim, cfg.trunk_width, cfg.trunk_depth)
        self.base_net = _mlp(cfg.trunk_width, cfg.branch_width, cfg.branch_depth)
        self.base_head = nn.Linear(cfg.branch_width, 4)
        adin = cfg.trunk_width + enc.dir_dim() + cfg.color_dim
        self.adaptive_net = _mlp(adin, cfg.branch_width, cfg.branch_depth)
        self.adaptive_head = nn.Linear(cfg.branch_width, 4)

    def trunk(self, x_enc: torch.Tensor, f_base: torch.Tensor) -> torch.Tensor:
        return trunk(self, x_enc, f_base)

    def base_branch(self, h):
        return base_branch(self, h)

    def adaptive_branch(self, h, d_enc, f_color):
        return adaptive_branch(self, h, d_enc, f_color)


def trunk(net: RadianceField, x_enc: torch.Tensor, f_base: torch.Tensor) -> torch.Tensor:
    expected = net.trunk_net[0].in_features
    got = x_enc.shape[-1] + f_base.shape[-1]
    if got != expected:
        raise ValueError(f"trunk input has {got} features, expected {expected}")
    return net.trunk_net(torch.cat([x_enc, f_base], dim=-1))


def _heads(raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.sigmoid(raw[..., :3]), F.softplus(raw[..., 3])


def base_branch(net: RadianceField, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(c_b, sigma_b); the view direction is not an input."""
    return _heads(net.base_head(net.base_net(h)))


def adaptive_branch(net: RadianceField, h: torch.Tensor, d_enc: torch.Tensor,
                    f_color: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(c_a, sigma_a) from the latent, the encoded direction and source features."""
    return _heads(net.adaptive_head(net.adaptive_net(torch.cat([h, d_enc, f_color], dim=-1))))


def fuse(c_b, sigma_b, c_a, sigma_a, U, density_fusion: str = "paper", check: bool = True):
    """Uncertainty-weighted fusion of the two branches.

    Color moves toward the adaptive branch as U grows. With ``"paper"``
    density moves toward the base branch as U grows; ``"swapped"`` reverses
    the density weights.
    """
    U = torch.as_tensor(U, dtype=c_b.dtype)
    if check and bool(((U < 0) | (U > 1)).any()):
        raise ValueError("uncertainty must lie in [0, 1]")
    if density_fusion not in FUSION_MODES:
        raise ValueError(f"density_fusion must be one of {FUSION_MODES}, got {density_fusion!r}")
    Uc = U.unsqueeze(-1) if U.ndim == c_b.ndim - 1 else U
    c = c_b * (1.0 - Uc) + c_a * Uc
    if density_fusion == "paper":
        sigma = sigma_b * U + sigma_a * (1.0 - U)
    else:
        sigma = sigma_b * (1.0 - U) + sigma_a * U
    return c, sigma


@dataclass
class FieldOutput:
    c_b: torch.Tensor
    sigma_b: torch.Tensor
    c_a: torch.Tensor
    sigma_a: torch.Tensor
    color: torch.Tensor
    sigma: torch.Tensor


def evaluate_points(net: RadianceField, x: torch.Tensor, d: torch.Tensor, U: torch.Tensor,
                    ctx: ConditionContext, density_fusion: str = "paper",
                    use_adaptive_branch: bool = True) -> FieldOutput:
    """Field values at points ``x`` (P, 3) viewed along unit directions ``d`` (P, 3)."""
    enc = net.cfg.encoding
    cond = gather_condition(x, ctx)
    h = trunk(net, raycore.positional_encode(x, enc.L_pos, enc.include_identity), cond.f_base)
    c_b, s_b = base_branch(net, h)
    if use_adaptive_branch:
        d_enc = raycore.positional_encode(d, enc.L_dir, enc.include_identity)
        c_a, s_a = adaptive_branch(net, h, d_enc, cond.f_color)
    else:
        c_a, s_a = c_b, s_b
    c, s = fuse(c_b, s_b, c_a, s_a, U, density_fusion)
    return FieldOutput(c_b, s_b, c_a, s_a, c, s)


@dataclass
class RenderOutput:
    color: torch.Tensor  # (R, 3)
    raw_depth: torch.Tensor  # (R,) expected ray distance, no closure
    depth: torch.Tensor  # (R,) camera z-depth with residual placed at far
    opacity: torch.Tensor  # (R,)
    t: torch.Tensor  # (R, N)


def render_rays(net: RadianceField, rays: RayBundle, U: torch.Tensor, ctx: ConditionContext,
                n_samples: int = 90, generator: torch.Generator | None = None, perturb: bool = True,
                background=(0.0, 0.0, 0.0), density_fusion: str = "paper",
                use_adaptive_branch: bool = True) -> RenderOutput:
    """Volume-render a ray bundle; ``U`` (R,) is held constant along each ray."""
    dtype = next(net.parameters()).dtype
    t = raycore.stratified_sample(rays.near, rays.far, n_samples, generator, perturb).to(dtype)
    o = rays.origins.to(dtype)
    dirs = rays.directions.to(dtype)
    x = o[:, None, :] + t[..., None] * dirs[:, None, :]
    n_rays = len(rays)
    d = dirs[:, None, :].expand(-1, n_samples, -1).reshape(-1, 3)
    u = torch.as_tensor(U, dtype=dtype).reshape(n_rays, 1).expand(-1, n_samples).reshape(-1)
    out = evaluate_points(net, x.reshape(-1, 3), d, u, ctx, density_fusion, use_adaptive_branch)
    far = rays.far.to(dtype)
    batch = SampleBatch.from_t(t, far, out.sigma.reshape(n_rays, n_samples),
                               out.color.reshape(n_rays, n_samples, 3))
    w, residual = raycore.weights(batch.sigma, batch.delta, check=False)
    color = raycore._accumulate(w.unsqueeze(-2), batch.color.transpose(-1, -2))
    color = color + residual.unsqueeze(-1) * torch.as_tensor(background, dtype=dtype)
    raw = raycore._accumulate(w, t)
    acc = 1.0 - residual
    depth = raycore.close_depth(raw, acc, far) * rays.cos.to(dtype)
    return RenderOutput(color=color, raw_depth=raw, depth=depth, opacity=acc, t=t)


def render_pixel(net: RadianceField, camera: Camera, pixel, U: float, ctx: ConditionContext, near: float,
                 far: float, **kwargs) -> tuple[torch.Tensor, torch.Tensor]:
    """(color, z-depth) of one continuous pixel position."""
    rays = raycore.generate_rays(camera, [pixel], near, far)
    out = render_rays(net, rays, torch.tensor([float(U)]), ctx, **kwargs)
    return out.color[0], out.depth[0]

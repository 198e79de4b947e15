"""Plane-sweep consistency learner.

A small three-stage feature pyramid, homography warping of source features
into the target frustum, variance cost volumes, a trainable volumetric
regularizer, depth expectation, the four-plane uncertainty map and the
SfM-weighted consistency loss.

Tensor layouts (no batch axis; one target view per call):

* feature maps ``(C, H, W)``
* hypothesis depths, probability volumes ``(D, H, W)``
* cost volumes ``(D, C, H, W)``
* neural volumes ``(C, D, H, W)``

Pixel coordinates follow :mod:`ucnerf.camera`: the image spans ``[0, W]``
and pixel ``(u, v)`` has its center at ``(u + 0.5, v + 0.5)``. Sampling uses
``grid_sample(align_corners=False)``, whose normalized coordinate for a
continuous position ``u`` is ``2 u / W - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .camera import Camera

N_STAGES = 3
DEFAULT_PLANES = (48, 32, 8)
DEFAULT_STAGE_WEIGHTS = (0.5, 1.0, 2.0)
RANGE_SHRINK = 3.0


def stage_factor(k: int) -> int:
    """Downsampling factor of stage ``k`` relative to the input image."""
    return 2 ** (N_STAGES - 1 - k)


def stage_channels(z: int, k: int) -> int:
    return max(1, z // 2**k)


# --- features -----------------------------------------------------------------


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.ReLU(inplace=False))


class FeatureNet(nn.Module):
    """Three-level FPN: stage k is at 1/2^(2-k) resolution with Z/2^k channels."""

    def __init__(self, z: int = 8, base: int = 8):
        super().__init__()
        self.z = z
        self.conv0 = nn.Sequential(_conv(3, base), _conv(base, base))
        self.conv1 = nn.Sequential(_conv(base, 2 * base, 2), _conv(2 * base, 2 * base))
        self.conv2 = nn.Sequential(_conv(2 * base, 4 * base, 2), _conv(4 * base, 4 * base))
        self.inner1 = nn.Conv2d(2 * base, 4 * base, 1)
        self.inner0 = nn.Conv2d(base, 4 * base, 1)
        self.out = nn.ModuleList(
            [nn.Conv2d(4 * base, stage_channels(z, k), 1 if k == 0 else 3, 1, 0 if k == 0 else 1) for k in range(N_STAGES)]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        c0 = self.conv0(x)
        c1 = self.conv1(c0)
        c2 = self.conv2(c1)
        top = c2
        feats = [self.out[0](top)]
        top = F.interpolate(top, size=c1.shape[-2:], mode="nearest") + self.inner1(c1)
        feats.append(self.out[1](top))
        top = F.interpolate(top, size=c0.shape[-2:], mode="nearest") + self.inner0(c0)
        feats.append(self.out[2](top))
        return feats


@dataclass
class FeaturePyramid:
    stages: list  # per stage (C_k, H_k, W_k)

    def __getitem__(self, k):
        return self.stages[k]


def extract_features(net: FeatureNet, images) -> list[FeaturePyramid]:
    """Run ``net`` over a list of (H, W, 3) or (3, H, W) images.

    Images must share a size divisible by 4 (the coarsest stage is H/4 x W/4).
    """
    if len(images) < 2:
        raise ValueError(f"need at least 2 views, got {len(images)}")
    batch = []
    for im in images:
        t = torch.as_tensor(im)
        if t.ndim != 3:
            raise ValueError(f"expected a 3-D image, got shape {tuple(t.shape)}")
        if t.shape[-1] == 3 and t.shape[0] != 3:
            t = t.permute(2, 0, 1)
        batch.append(t)
    shapes = {tuple(t.shape) for t in batch}
    if len(shapes) != 1:
        raise ValueError(f"images have mismatched sizes: {sorted(shapes)}")
    h, w = batch[0].shape[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"image size {w}x{h} must be divisible by 4")
    dtype = next(net.parameters()).dtype
    feats = net(torch.stack(batch).to(dtype))
    return [FeaturePyramid([f[i] for f in feats]) for i in range(len(batch))]


# --- warping ------------------------------------------------------------------


def pixel_grid(width: int, height: int, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Pixel-center coordinates (H, W) for u and v."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype) + 0.5, torch.arange(width, dtype=dtype) + 0.5, indexing="ij"
    )
    return u, v


def backproject(tgt: Camera, depth: torch.Tensor) -> torch.Tensor:
    """World points (..., H, W, 3) of target pixel centers at z-depths ``depth`` (..., H, W)."""
    dtype = depth.dtype
    u, v = pixel_grid(tgt.width, tgt.height, dtype)
    ray = torch.stack([(u - tgt.cx) / tgt.fx, (v - tgt.cy) / tgt.fy, torch.ones_like(u)], dim=-1)
    R, t = tgt.torch_pose(dtype)
    cam = ray * depth.unsqueeze(-1)
    return (cam - t) @ R


def project(cam: Camera, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Continuous pixel coordinates (..., 2) and z-depth (...) of world points."""
    R, t = cam.torch_pose(points.dtype)
    p = points @ R.T + t
    z = p[..., 2]
    zs = torch.where(z.abs() < 1e-12, torch.full_like(z, 1e-12), z)
    uv = torch.stack([cam.fx * p[..., 0] / zs + cam.cx, cam.fy * p[..., 1] / zs + cam.cy], dim=-1)
    return uv, z


def normalize_uv(uv: torch.Tensor, width: int, height: int) -> torch.Tensor:
    scale = torch.tensor([2.0 / width, 2.0 / height], dtype=uv.dtype)
    return uv * scale - 1.0


def in_view(uv: torch.Tensor, z: torch.Tensor, width: int, height: int) -> torch.Tensor:
    return (z > 1e-6) & (uv[..., 0] >= 0) & (uv[..., 0] <= width) & (uv[..., 1] >= 0) & (uv[..., 1] <= height)


def sample_image(feature: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear sample of (C, H, W) at continuous coords (..., 2); returns (..., C)."""
    c, h, w = feature.shape
    grid = normalize_uv(uv, w, h).reshape(1, 1, -1, 2).to(feature.dtype)
    out = F.grid_sample(feature[None], grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out[0, :, 0].T.reshape(*uv.shape[:-1], c)


def warp_to_target(feature: torch.Tensor, src: Camera, tgt: Camera, depths: torch.Tensor):
    """Warp a source map (C, Hs, Ws) onto target pixels at per-pixel z-depths (D, H, W).

    Returns warped features (D, C, H, W) and a validity mask (D, H, W); invalid
    samples are zero. ``src`` and ``tgt`` must be expressed at the resolution of
    their respective maps.
    """
    if bool((depths <= 0).any()):
        raise ValueError("plane depths must be positive")
    pts = backproject(tgt, depths.to(torch.float64))
    uv, z = project(src, pts)
    valid = in_view(uv, z, src.width, src.height)
    warped = sample_image(feature, uv.to(feature.dtype))  # (D, H, W, C)
    warped = warped * valid.unsqueeze(-1).to(feature.dtype)
    return warped.permute(0, 3, 1, 2), valid


def homography_warp(feature: torch.Tensor, src_cam: Camera, tgt_cam: Camera, plane_depth: float):
    """Warp a source map onto a fronto-parallel target plane at z = ``plane_depth``.

    Returns (C, H, W) features and an (H, W) validity mask.
    """
    if not plane_depth > 0:
        raise ValueError(f"plane_depth must be positive, got {plane_depth}")
    d = torch.full((1, tgt_cam.height, tgt_cam.width), float(plane_depth), dtype=torch.float64)
    warped, valid = warp_to_target(feature, src_cam, tgt_cam, d)
    return warped[0], valid[0]


# --- cost volume and regularization ------------------------------------------------


def build_cost_volume(warped: torch.Tensor, masks: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Variance across views of warped features.

    ``warped`` is (N, D, C, H, W), ``masks`` (N, D, H, W). Variance uses only
    valid views; entries with fewer than two valid views are flagged and get
    the maximum cost found among the unflagged entries (1 if there are none).
    Returns (cost (D, C, H, W), flagged (D, H, W)).
    """
    if warped.shape[0] < 2:
        raise ValueError(f"need at least 2 views, got {warped.shape[0]}")
    m = masks.to(warped.dtype).unsqueeze(2)
    count = m.sum(0)
    denom = count.clamp_min(1.0)
    mean = (warped * m).sum(0) / denom
    var = (((warped - mean) ** 2) * m).sum(0) / denom
    flagged = count[:, 0] < 2
    if bool(flagged.any()):
        ok = ~flagged
        fill = var[ok.unsqueeze(1).expand_as(var)].max() if bool(ok.any()) else var.new_tensor(1.0)
        var = torch.where(flagged.unsqueeze(1), fill, var)
    return var, flagged


class RegNet(nn.Module):
    """Volumetric smoother producing a neural volume S and a probability volume P.

    The depth logit is a learnable 3x3x3 smoothing (binomial at init) of
    ``-gain * c_d / mean_d(c)`` with ``c = mean_c(cost)``, plus a learned
    correction computed from the raw cost. Dividing by the per-pixel mean
    over planes makes an untrained regularizer prefer the low-cost plane no
    matter how small the untrained features are; the raw-cost branch keeps P
    sensitive to the cost scale.
    """

    def __init__(self, in_channels: int, out_channels: int, hidden: int = 4, gain: float = 20.0):
        super().__init__()
        self.log_gain = nn.Parameter(torch.tensor(float(gain)).log())
        self.smooth = nn.Conv3d(1, 1, 3, padding=1, padding_mode="replicate", bias=False)
        # separable binomial kernel: smooths without flattening a single-plane minimum
        k = torch.tensor([1.0, 2.0, 1.0]) / 4.0
        with torch.no_grad():
            self.smooth.weight.copy_((k[:, None, None] * k[None, :, None] * k[None, None, :]).view(1, 1, 3, 3, 3))
        self.body = nn.Sequential(
            nn.Conv3d(in_channels, hidden, 3, padding=1, padding_mode="replicate"),
            nn.ReLU(),
        )
        self.to_volume = nn.Conv3d(hidden, out_channels, 1)
        self.to_logit = nn.Conv3d(hidden, 1, 1)

    def base_logit(self, x: torch.Tensor) -> torch.Tensor:
        """Smoothed relative-cost logit for x of shape (1, C, D, H, W)."""
        c = x.mean(1, keepdim=True)
        rel = c / (c.mean(2, keepdim=True) + 1e-12)
        return self.smooth(-self.log_gain.exp() * rel)

    def forward(self, cost: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = cost.permute(1, 0, 2, 3).unsqueeze(0)  # (1, C, D, H, W)
        hidden = self.body(x)
        logit = self.base_logit(x) + self.to_logit(hidden)
        P = torch.softmax(logit[0, 0], dim=0)
        S = self.to_volume(hidden)[0]
        return S, P


def regularize_volume(net: RegNet, cost: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(S (C, D, H, W), P (D, H, W)) from a cost volume (D, C, H, W)."""
    return net(cost)


# --- depth and uncertainty ------------------------------------------------------


def expect_depth(P: torch.Tensor, depths: torch.Tensor) -> torch.Tensor:
    """Per-pixel expectation sum_d P(d) d; ``depths`` is (D,) or (D, H, W)."""
    if depths.ndim == 1:
        depths = depths.view(-1, *([1] * (P.ndim - 1)))
    return (P * depths).sum(0)


def plane_index(depth_map: torch.Tensor, depths: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Index of the last plane at or below the depth estimate, clamped to [0, D-1]."""
    if depths.ndim == 1:
        depths = depths.view(-1, *([1] * depth_map.ndim)).expand(-1, *depth_map.shape)
    below = (depths <= depth_map.unsqueeze(0) + eps).sum(0) - 1
    return below.clamp(0, depths.shape[0] - 1)


def uncertainty_map(P: torch.Tensor, depth_map: torch.Tensor, depths: torch.Tensor) -> torch.Tensor:
    """U = 1 - (mass on planes j-1 .. j+2), window truncated at the volume ends."""
    j = plane_index(depth_map.detach(), depths)
    idx = torch.arange(P.shape[0]).view(-1, *([1] * j.ndim))
    window = (idx >= j - 1) & (idx <= j + 2)
    mass = (P * window.to(P.dtype)).sum(0)
    return (1.0 - mass).clamp(0.0, 1.0)


# --- cascade -----------------------------------------------------------------------


@dataclass
class DepthHypothesisGrid:
    near: float
    far: float
    planes: tuple = DEFAULT_PLANES

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")
        if len(self.planes) != N_STAGES or any(int(p) < 2 for p in self.planes):
            raise ValueError(f"need {N_STAGES} plane counts >= 2, got {self.planes}")

    def width(self, k: int) -> float:
        return (self.far - self.near) / RANGE_SHRINK**k


def stage_hypotheses(grid: DepthHypothesisGrid, k: int, height: int, width: int,
                     prev: torch.Tensor | None = None, dtype=torch.float32) -> torch.Tensor:
    """Per-pixel plane depths (D_k, H, W) for stage ``k``.

    Stage 0 spans [near, far]. Later stages span ``grid.width(k)`` centered
    on the (upsampled, detached) previous estimate, shifted to stay inside
    [near, far].
    """
    n = int(grid.planes[k])
    lin = torch.linspace(0.0, 1.0, n, dtype=dtype).view(-1, 1, 1)
    if k == 0 or prev is None:
        return (grid.near + lin * (grid.far - grid.near)).expand(n, height, width).contiguous()
    w = grid.width(k)
    center = F.interpolate(prev.detach()[None, None].to(dtype), size=(height, width), mode="bilinear",
                           align_corners=False)[0, 0]
    start = (center - 0.5 * w).clamp(grid.near, grid.far - w)
    return start.unsqueeze(0) + lin * w


@dataclass
class CascadeOutput:
    volumes: list  # S^(k) (C_k, D_k, H_k, W_k)
    probs: list  # P^(k) (D_k, H_k, W_k)
    hypotheses: list  # (D_k, H_k, W_k)
    depths: list  # D~^(k) (H_k, W_k)
    uncertainty: torch.Tensor  # (H, W) at stage-2 resolution
    source_features: list = field(default_factory=list)  # stage-2 maps of the source views
    flagged: list = field(default_factory=list)


class Cascade(nn.Module):
    """Feature extractor plus one regularizer per stage."""

    def __init__(self, z: int = 8, planes=DEFAULT_PLANES, reg_hidden: int = 4):
        super().__init__()
        self.z = z
        self.planes = tuple(int(p) for p in planes)
        self.features = FeatureNet(z)
        self.regs = nn.ModuleList(
            [RegNet(stage_channels(z, k), stage_channels(z, k), reg_hidden) for k in range(N_STAGES)]
        )

    def volume_channels(self) -> list[int]:
        return [stage_channels(self.z, k) for k in range(N_STAGES)]

    def forward(self, images, cameras: list[Camera], tgt_cam: Camera, near: float, far: float) -> CascadeOutput:
        return run_cascade(self, images, cameras, tgt_cam, DepthHypothesisGrid(near, far, self.planes))


def run_cascade(model: Cascade, images, cameras: list[Camera], tgt_cam: Camera,
                grid: DepthHypothesisGrid) -> CascadeOutput:
    """Coarse-to-fine depth estimation in the target frustum from source views."""
    if len(images) != len(cameras):
        raise ValueError("images and cameras differ in length")
    pyramids = extract_features(model.features, images)
    dtype = next(model.parameters()).dtype
    out = CascadeOutput([], [], [], [], None)
    prev = None
    for k in range(N_STAGES):
        f = stage_factor(k)
        tgt_k = tgt_cam.scaled(f)
        hyps = stage_hypotheses(grid, k, tgt_k.height, tgt_k.width, prev, dtype)
        warped, masks = [], []
        for pyr, cam in zip(pyramids, cameras):
            w, m = warp_to_target(pyr[k], cam.scaled(f), tgt_k, hyps)
            warped.append(w)
            masks.append(m)
        cost, flagged = build_cost_volume(torch.stack(warped), torch.stack(masks))
        S, P = regularize_volume(model.regs[k], cost)
        depth = expect_depth(P, hyps)
        out.volumes.append(S)
        out.probs.append(P)
        out.hypotheses.append(hyps)
        out.depths.append(depth)
        out.flagged.append(flagged)
        prev = depth
    out.uncertainty = uncertainty_map(out.probs[-1], out.depths[-1], out.hypotheses[-1])
    out.source_features = [pyr[N_STAGES - 1] for pyr in pyramids]
    return out


# --- consistency loss --------------------------------------------------------------


def sample_depth_map(depth: torch.Tensor, u, v, full_width: int, full_height: int) -> torch.Tensor:
    """Bilinear sample of a stage map (H_k, W_k) at full-resolution integer pixels."""
    hk, wk = depth.shape
    sx, sy = full_width / wk, full_height / hk
    u = torch.as_tensor(u, dtype=depth.dtype)
    v = torch.as_tensor(v, dtype=depth.dtype)
    uv = torch.stack([(u + 0.5) / sx, (v + 0.5) / sy], dim=-1)
    return sample_image(depth[None], uv)[..., 0]


def consistency_loss(depths: list, sparse, full_width: int, full_height: int,
                     stage_weights=DEFAULT_STAGE_WEIGHTS) -> torch.Tensor:
    """sum_k alpha_k * mean_points exp(-(w/w_bar)^2) |D~_k(u, v) - D_sfm|.

    ``sparse`` provides integer pixel arrays ``u``, ``v``, depths and
    reprojection errors ``omega`` at full resolution.
    """
    if len(sparse.depth) == 0:
        raise ValueError("sparse depth map is empty")
    dtype = depths[0].dtype
    omega = torch.as_tensor(sparse.omega, dtype=dtype)
    wbar = omega.mean()
    weight = torch.exp(-((omega / wbar) ** 2)) if float(wbar) > 0 else torch.ones_like(omega)
    target = torch.as_tensor(sparse.depth, dtype=dtype)
    total = depths[0].new_zeros(())
    for alpha, d in zip(stage_weights, depths):
        pred = sample_depth_map(d, sparse.u, sparse.v, full_width, full_height)
        total = total + alpha * (weight * (pred - target).abs()).mean()
    return total

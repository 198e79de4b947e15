"""Rays, stratified sampling, positional encoding and volume compositing.

All compositing functions operate on the last axis and broadcast over any
leading batch dimensions, so a (rays, samples) batch is handled in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .camera import Camera


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple

    def __post_init__(self):
        if abs(float(np.linalg.norm(self.direction)) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass
class RayBundle:
    """A batch of rays as tensors.

    ``near``/``far`` are ray distances. ``cos`` is the cosine between each
    ray and its camera's optical axis, used to turn ray distance into z-depth.
    """

    origins: torch.Tensor  # (R, 3)
    directions: torch.Tensor  # (R, 3)
    near: torch.Tensor  # (R,)
    far: torch.Tensor  # (R,)
    cos: torch.Tensor  # (R,)
    pixels: torch.Tensor  # (R, 2) continuous image coordinates

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, i) -> Ray:
        return Ray(
            origin=self.origins[i].detach().cpu().double().numpy(),
            direction=self.directions[i].detach().cpu().double().numpy(),
            near=float(self.near[i]),
            far=float(self.far[i]),
            pixel=tuple(float(p) for p in self.pixels[i]),
        )

    def subset(self, idx) -> "RayBundle":
        return RayBundle(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx],
                         self.cos[idx], self.pixels[idx])


def generate_rays(
    camera: Camera,
    pixels,
    near: float = 1.0,
    far: float = 2.0,
    z_bounds: bool = True,
    dtype=torch.float64,
) -> RayBundle:
    """Rays through continuous pixel coordinates ``pixels`` (P, 2).

    With ``z_bounds`` the interval [near, far] is a z-depth slab, so each ray
    gets its own ray-distance bounds ``near / cos``, ``far / cos``; otherwise
    the bounds are used as ray distances directly.
    """
    pix = torch.as_tensor(np.asarray(pixels, dtype=np.float64), dtype=torch.float64).reshape(-1, 2)
    if ((pix[:, 0] < 0) | (pix[:, 0] >= camera.width) | (pix[:, 1] < 0) | (pix[:, 1] >= camera.height)).any():
        raise ValueError(f"pixel outside image bounds {camera.width}x{camera.height}")
    R = torch.as_tensor(camera.rotation, dtype=torch.float64)
    cam_dirs = torch.stack(
        [(pix[:, 0] - camera.cx) / camera.fx, (pix[:, 1] - camera.cy) / camera.fy, torch.ones(len(pix), dtype=torch.float64)],
        dim=-1,
    )
    dirs = cam_dirs @ R  # row-vector form of R^T d
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    cos = dirs @ R[2]
    origins = torch.as_tensor(camera.center, dtype=torch.float64).expand_as(dirs)
    n = torch.full((len(pix),), float(near), dtype=torch.float64)
    f = torch.full((len(pix),), float(far), dtype=torch.float64)
    if z_bounds:
        n, f = n / cos, f / cos
    return RayBundle(
        origins=origins.to(dtype).contiguous(), directions=dirs.to(dtype), near=n.to(dtype),
        far=f.to(dtype), cos=cos.to(dtype), pixels=pix.to(dtype),
    )


def stratified_sample(near, far, n_samples: int = 90, generator: torch.Generator | None = None,
                      perturb: bool = True) -> torch.Tensor:
    """One distance per equal-width bin of [near, far].

    ``near``/``far`` are tensors of shape (R,) (or scalars). With ``perturb``
    the position inside each bin is uniform; otherwise bin midpoints are used.
    Returns (R, n_samples), strictly ascending along the last axis.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    near = torch.as_tensor(near)
    far = torch.as_tensor(far, dtype=near.dtype)
    near, far = torch.broadcast_tensors(near, far)
    shape = near.shape + (n_samples,)
    if perturb:
        u = torch.rand(shape, generator=generator, dtype=near.dtype)
    else:
        u = torch.full(shape, 0.5, dtype=near.dtype)
    bins = torch.arange(n_samples, dtype=near.dtype)
    return near[..., None] + (bins + u) / n_samples * (far - near)[..., None]


@dataclass(frozen=True)
class EncodingConfig:
    L_pos: int = 10
    L_dir: int = 4
    include_identity: bool = True

    def __post_init__(self):
        if self.L_pos < 0 or self.L_dir < 0:
            raise ValueError("frequency counts must be non-negative")

    def pos_dim(self) -> int:
        return 3 * (int(self.include_identity) + 2 * self.L_pos)

    def dir_dim(self) -> int:
        return 3 * (int(self.include_identity) + 2 * self.L_dir)


def positional_encode(x: torch.Tensor, n_freqs: int, include_identity: bool = True) -> torch.Tensor:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]."""
    parts = [x] if include_identity else []
    for k in range(n_freqs):
        arg = (2.0**k * math.pi) * x
        parts.append(torch.sin(arg))
        parts.append(torch.cos(arg))
    if not parts:
        return x[..., :0]
    return torch.cat(parts, dim=-1)


@dataclass
class SampleBatch:
    """Samples along rays; every field has the sample axis last (color: (..., N, 3))."""

    t: torch.Tensor
    delta: torch.Tensor
    sigma: torch.Tensor
    color: torch.Tensor

    def __post_init__(self):
        n = self.t.shape[-1]
        if self.delta.shape[-1] != n or self.sigma.shape[-1] != n or self.color.shape[-2] != n:
            raise ValueError(
                f"sample batch length mismatch: t={tuple(self.t.shape)}, delta={tuple(self.delta.shape)}, "
                f"sigma={tuple(self.sigma.shape)}, color={tuple(self.color.shape)}"
            )

    @classmethod
    def from_t(cls, t, far, sigma, color) -> "SampleBatch":
        return cls(t=t, delta=deltas(t, far), sigma=sigma, color=color)


def deltas(t: torch.Tensor, far) -> torch.Tensor:
    """Spacing t_{i+1} - t_i; the last interval closes at ``far``."""
    far = torch.as_tensor(far, dtype=t.dtype)
    last = far.expand(t.shape[:-1]).unsqueeze(-1) - t[..., -1:]
    return torch.cat([t[..., 1:] - t[..., :-1], last], dim=-1)


def transmittance(sigma: torch.Tensor, delta: torch.Tensor, check: bool = True) -> torch.Tensor:
    """T_i = exp(-sum_{j<i} sigma_j delta_j); T_1 = 1."""
    if check and bool((sigma < 0).any()):
        raise ValueError("densities must be non-negative")
    tau = sigma * delta
    excl = torch.cat([torch.zeros_like(tau[..., :1]), torch.cumsum(tau[..., :-1], dim=-1)], dim=-1)
    return torch.exp(-excl)


def weights(sigma: torch.Tensor, delta: torch.Tensor, check: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample weights T_i (1 - exp(-sigma_i delta_i)) and residual transmittance T_{N+1}."""
    T = transmittance(sigma, delta, check=check)
    alpha = -torch.expm1(-sigma * delta)
    # sequential sum so an exactly-zero term never changes the rounding
    residual = torch.exp(-torch.cumsum(sigma * delta, dim=-1)[..., -1])
    return T * alpha, residual


def _accumulate(w: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    # fixed left-to-right summation order: inserting an exactly-zero term cannot change the result
    return torch.cumsum(w * values, dim=-1)[..., -1]


def composite_color(batch: SampleBatch, background=None, check: bool = True) -> torch.Tensor:
    """Rendered color sum_i w_i c_i plus ``background`` times residual transmittance."""
    w, residual = weights(batch.sigma, batch.delta, check=check)
    rgb = _accumulate(w.unsqueeze(-2), batch.color.transpose(-1, -2))
    if background is not None:
        bg = torch.as_tensor(background, dtype=rgb.dtype)
        rgb = rgb + residual.unsqueeze(-1) * bg
    return rgb


def composite_depth(batch: SampleBatch, check: bool = True) -> torch.Tensor:
    """Raw expected distance sum_i w_i t_i (0 for an empty ray)."""
    w, _ = weights(batch.sigma, batch.delta, check=check)
    return _accumulate(w, batch.t)


def opacity(batch: SampleBatch) -> torch.Tensor:
    w, residual = weights(batch.sigma, batch.delta, check=False)
    return 1.0 - residual


EMPTY_OPACITY = 1e-3


def close_depth(raw_depth: torch.Tensor, acc: torch.Tensor, far) -> torch.Tensor:
    """Reported depth: residual transmittance is placed at ``far``.

    Rays with opacity below ``EMPTY_OPACITY`` report exactly ``far``; an opaque
    ray reports its raw depth. The blend keeps the depth differentiable.
    """
    far = torch.as_tensor(far, dtype=raw_depth.dtype)
    closed = raw_depth + (1.0 - acc) * far
    return torch.where(acc < EMPTY_OPACITY, far.expand_as(closed), closed)

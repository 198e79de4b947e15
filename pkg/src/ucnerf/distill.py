"""Training losses and uncertainty-guided patch partitioning."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

PATCH_SIZE = 6
COMPONENTS = ("rgb", "con", "scale", "grad", "reg")


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 10.0
    con: float = 0.5
    scale: float = 0.5
    grad: float = 0.5
    reg: float = 0.05

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, k) for k in COMPONENTS)


@dataclass(frozen=True)
class SmoothnessConfig:
    beta: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


@dataclass(frozen=True)
class Patch:
    """A ``size`` x ``size`` block with top-left integer pixel (u0, v0)."""

    u0: int
    v0: int
    region: str
    size: int = PATCH_SIZE

    def pixels(self) -> np.ndarray:
        """(size*size, 2) integer pixel indices in row-major order."""
        v, u = np.meshgrid(np.arange(self.size) + self.v0, np.arange(self.size) + self.u0, indexing="ij")
        return np.stack([u.ravel(), v.ravel()], axis=-1)


class DegeneratePatchError(ValueError):
    """Raised when a least-squares scale/shift fit is ill-posed (constant prediction)."""


def rgb_loss(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the squared color error."""
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    return ((rendered - target) ** 2).sum(-1).mean()


def confidence_weights(omega: torch.Tensor, omega_bar=None) -> torch.Tensor:
    """exp(-(omega / omega_bar)^2); ones when omega_bar is zero."""
    if omega_bar is None:
        omega_bar = omega.mean()
    omega_bar = float(omega_bar)
    if omega_bar == 0.0:
        return torch.ones_like(omega)
    return torch.exp(-((omega / omega_bar) ** 2))


def scale_loss(rendered_depth: torch.Tensor, sfm_depth, omega, omega_bar=None) -> torch.Tensor:
    """Confidence-weighted L1 between rendered and SfM depth, averaged over points.

    ``omega_bar`` defaults to the mean of ``omega``; pass the mean over the
    whole view when only a subset of its points is rendered.
    """
    if rendered_depth.numel() == 0:
        raise ValueError("no sparse points to supervise")
    dtype = rendered_depth.dtype
    target = torch.as_tensor(sfm_depth, dtype=dtype)
    omega = torch.as_tensor(omega, dtype=dtype)
    w = confidence_weights(omega, omega_bar)
    return (w * (rendered_depth - target).abs()).mean()


def partition_patches(U, rng: np.random.Generator, n_patches: int = 50,
                      size: int = PATCH_SIZE) -> tuple[list[Patch], list[Patch]]:
    """Sample patch positions uniformly and split them by mean uncertainty.

    A patch is high-uncertainty iff its mean U is strictly above the
    image-mean U; ties go to the low-uncertainty set.
    """
    U = np.asarray(torch.as_tensor(U).detach().cpu().double())
    h, w = U.shape
    if h <= size or w <= size:
        raise ValueError(f"image {w}x{h} too small for {size}x{size} patches")
    threshold = U.mean()
    u0 = rng.integers(0, w - size + 1, size=n_patches)
    v0 = rng.integers(0, h - size + 1, size=n_patches)
    high, low = [], []
    for a, b in zip(u0, v0):
        m = U[b:b + size, a:a + size].mean()
        if m > threshold:
            high.append(Patch(int(a), int(b), "high_uncertainty", size))
        else:
            low.append(Patch(int(a), int(b), "low_uncertainty", size))
    return high, low


def solve_scale_shift(pred: torch.Tensor, prior: torch.Tensor, eps: float = 1e-12) -> tuple[torch.Tensor, torch.Tensor]:
    """Closed-form least squares (s, q) minimizing sum (prior - (s pred + q))^2.

    Differentiable in both inputs. Raises :class:`DegeneratePatchError` if
    ``pred`` has (numerically) zero variance.
    """
    pred = torch.as_tensor(pred).reshape(-1)
    prior = torch.as_tensor(prior, dtype=pred.dtype).reshape(-1)
    if pred.numel() != prior.numel():
        raise ValueError("pred and prior differ in size")
    pm, qm = pred.mean(), prior.mean()
    dp = pred - pm
    var = (dp * dp).mean()
    if float(var.detach()) <= eps * (1.0 + float(pm.detach()) ** 2):
        raise DegeneratePatchError("rendered depth is constant over the patch")
    s = (dp * (prior - qm)).mean() / var
    return s, qm - s * pm


def _forward_diffs(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return x[..., :, 1:] - x[..., :, :-1], x[..., 1:, :] - x[..., :-1, :]


def grad_loss(pred: torch.Tensor, prior: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Scale-invariant gradient loss over high-uncertainty patches.

    ``pred`` and ``prior`` are (P, S, S). Each patch's rendered depth is
    affinely aligned to the prior; the loss is the mean absolute forward
    difference of the residual, averaged over both axes and then over patches.
    Returns (loss, number of degenerate patches skipped).
    """
    if pred.shape != prior.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(prior.shape)}")
    terms, skipped = [], 0
    for p, d in zip(pred, prior):
        try:
            s, q = solve_scale_shift(p, d)
        except DegeneratePatchError:
            skipped += 1
            continue
        gx, gy = _forward_diffs(d - (s * p + q))
        terms.append(0.5 * (gx.abs().mean() + gy.abs().mean()))
    if not terms:
        return pred.new_zeros(()), skipped
    return torch.stack(terms).mean(), skipped


def smooth_loss(pred: torch.Tensor, prior: torch.Tensor, cfg: SmoothnessConfig = SmoothnessConfig(),
                scale: float = 1.0) -> torch.Tensor:
    """Edge-aware smoothness over low-uncertainty patches (P, S, S).

    Per axis, the mean of exp(-beta |d prior|) |d pred| with forward
    differences; the two axis terms are added. Depths are divided by
    ``scale`` (the scene's far plane) first.
    """
    if pred.shape != prior.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(prior.shape)}")
    if pred.shape[0] == 0:
        return pred.new_zeros(())
    px, py = _forward_diffs(pred / scale)
    dx, dy = _forward_diffs(torch.as_tensor(prior, dtype=pred.dtype) / scale)
    return (torch.exp(-cfg.beta * dx.abs()) * px.abs()).mean() + (torch.exp(-cfg.beta * dy.abs()) * py.abs()).mean()


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component!r} is not finite: {value}")
        self.component = component


def total_loss(components: dict, weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted sum of the named loss components (missing ones count as 0)."""
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    total = None
    for name in COMPONENTS:
        value = components.get(name, 0.0)
        scalar = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(scalar):
            raise NonFiniteLossError(name, scalar)
        term = getattr(weights, name) * value
        total = term if total is None else total + term
    return torch.as_tensor(total)

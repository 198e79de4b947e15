"""Image and depth evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

LUMA = np.array([0.299, 0.587, 0.114])
PSNR_INF = float("inf")


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; ``inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return -10.0 * math.log10(mse)


def to_gray(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image @ LUMA
    return image


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def ssim(a, b, window: int = 11, data_range: float = 1.0, sigma: float = 1.5) -> float:
    """Mean SSIM over valid (fully covered) window positions of the luma images.

    Color images are converted with Rec. 601 luma weights (0.299, 0.587, 0.114).
    """
    x, y = to_gray(a), to_gray(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} window")
    g = _gaussian_window(window, sigma)

    def blur(img):
        return correlate1d(correlate1d(img, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")

    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    pad = (window - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


def median_scale(pred, gt, mask=None) -> tuple[np.ndarray, float]:
    """Scale ``pred`` so its median over ``mask`` matches that of ``gt``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    mp = np.median(pred[mask])
    mg = np.median(gt[mask])
    if mp == 0 or mg == 0:
        raise ValueError("zero median depth")
    factor = float(mg / mp)
    return pred * factor, factor


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta_125: float
    scale: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def depth_metrics(pred, gt, mask=None, scale: float = 1.0) -> DepthMetrics:
    """Standard depth errors; ``pred`` is expected to be median-scaled already."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.ones(pred.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    p, g = pred[mask], gt[mask]
    if p.size == 0:
        raise ValueError("mask is empty")
    if np.any(p <= 0) or np.any(g <= 0):
        raise ValueError("depths inside the mask must be positive")
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta_125=float(np.mean(ratio < 1.25)),
        scale=float(scale),
    )


def evaluate_depth(pred, gt, mask=None) -> DepthMetrics:
    scaled, factor = median_scale(pred, gt, mask)
    return depth_metrics(scaled, gt, mask, factor)


IMAGE_KEYS = ("psnr", "ssim")
DEPTH_KEYS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta_125")


def aggregate(rows: list[dict], keys) -> dict:
    """Mean and (population) standard deviation of each key over rows."""
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def format_table(rows: list[dict], summary: dict, keys) -> str:
    """Plain-text table with per-view rows and a mean +/- std footer."""
    head = ["view"] + list(keys)
    lines = ["  ".join(f"{h:>10}" for h in head)]
    for r in rows:
        lines.append("  ".join([f"{r['view']:>10}"] + [f"{r[k]:>10.4f}" for k in keys]))
    lines.append("  ".join([f"{'mean':>10}"] + [f"{summary[k]['mean']:>10.4f}" for k in keys]))
    lines.append("  ".join([f"{'std':>10}"] + [f"{summary[k]['std']:>10.4f}" for k in keys]))
    return "\n".join(lines) + "\n"

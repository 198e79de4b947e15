"""Brute-force reference computations.

Everything here is deliberately written with explicit loops in float64
numpy and shares no kernels with the trainable code paths, so it can be
used to cross-check them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class OracleConfig:
    fd_step: float = 1e-5
    quadrature_n: int = 4096

    def __post_init__(self):
        if not self.fd_step > 0:
            raise ValueError(f"fd_step must be positive, got {self.fd_step}")
        if self.quadrature_n < 1024:
            raise ValueError(f"quadrature_n must be >= 1024, got {self.quadrature_n}")


def finite_diff_grad(f: Callable[[np.ndarray], float], x, cfg: OracleConfig = OracleConfig()) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    h = cfg.fd_step
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


@dataclass
class QuadratureResult:
    color: np.ndarray  # (R, 3), background composited
    depth: np.ndarray  # (R,), residual transmittance placed at ``far``
    raw_depth: np.ndarray  # (R,), sum of w_i t_i only
    opacity: np.ndarray  # (R,)


def dense_quadrature_render(
    density: Callable[[np.ndarray], np.ndarray],
    color: Callable[[np.ndarray, np.ndarray], np.ndarray],
    origins,
    directions,
    near,
    far,
    cfg: OracleConfig = OracleConfig(),
    background=(0.0, 0.0, 0.0),
    n_samples: int | None = None,
) -> QuadratureResult:
    """Midpoint-rule volume rendering with ``cfg.quadrature_n`` samples per ray.

    ``density(x)`` maps (R, 3) points to (R,) and ``color(x, d)`` maps points
    and unit directions to (R, 3). The loop marches all rays in lock-step,
    accumulating transmittance as a running product. ``n_samples`` overrides
    ``cfg.quadrature_n`` for cheaper renders.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n_rays = o.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))
    n = cfg.quadrature_n if n_samples is None else int(n_samples)
    step = (far - near) / n

    trans = np.ones(n_rays)
    rgb = np.zeros((n_rays, 3))
    raw_depth = np.zeros(n_rays)
    for i in range(n):
        t = near + (i + 0.5) * step
        x = o + t[:, None] * d
        sigma = np.asarray(density(x), dtype=np.float64)
        survive = np.exp(-sigma * step)
        w = trans * (1.0 - survive)
        live = w > 0
        if live.any():
            c = np.zeros((n_rays, 3))
            c[live] = color(x[live], d[live])
            rgb += w[:, None] * c
            raw_depth += w * t
        trans = trans * survive
    rgb += trans[:, None] * np.asarray(background, dtype=np.float64)
    return QuadratureResult(
        color=rgb,
        depth=raw_depth + trans * far,
        raw_depth=raw_depth,
        opacity=1.0 - trans,
    )


def brute_expectation(probabilities, plane_depths) -> float:
    """Expected depth of one pixel's plane distribution, summed term by term."""
    total = 0.0
    for p, d in zip(probabilities, plane_depths):
        total += float(p) * float(d)
    return total

"""Pinhole camera with a world-to-camera pose.

Conventions used throughout the package:

* camera frame is x right, y down, z forward (OpenCV style);
* ``rotation``/``translation`` map world points into the camera frame,
  ``p_cam = R @ p_world + t``;
* continuous image coordinates put the *edges* of the image at 0 and
  ``width``/``height``; the integer pixel index ``(u, v)`` has its center at
  ``(u + 0.5, v + 0.5)``. Downscaling intrinsics by ``s`` is therefore exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction (camera +z) in world coordinates."""
        return self.rotation[2].copy()

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image downsampled by ``factor`` (e.g. 4 for a quarter-res feature map)."""
        return Camera(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            rotation=self.rotation,
            translation=self.translation,
            width=int(round(self.width / factor)),
            height=int(round(self.height / factor)),
        )

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points (..., 3) to continuous pixel coords (..., 2) and depth (...)."""
        p = points @ self.rotation.T + self.translation
        z = p[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack(
                [self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1
            )
        return uv, z

    def torch_pose(self, dtype=torch.float32, device=None) -> tuple[torch.Tensor, torch.Tensor]:
        return (
            torch.as_tensor(self.rotation, dtype=dtype, device=device),
            torch.as_tensor(self.translation, dtype=dtype, device=device),
        )

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "R": [float(v) for v in self.rotation.reshape(-1)],
            "t": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            fx=d["fx"],
            fy=d["fy"],
            cx=d["cx"],
            cy=d["cy"],
            rotation=np.asarray(d["R"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["t"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``center`` looking at ``target``.

    The image "down" axis is aligned with ``-up`` projected onto the image plane.
    """
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    down = -(up - np.dot(up, forward) * forward)
    norm = np.linalg.norm(down)
    if norm < 1e-12:
        raise ValueError("up vector is parallel to the viewing direction")
    down /= norm
    right = np.cross(down, forward)
    R = np.stack([right, down, forward])
    return R, -R @ center


def rotation_angle(R1: np.ndarray, R2: np.ndarray) -> float:
    """Geodesic angle (radians) between two rotations."""
    cos = (np.trace(R1 @ R2.T) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))

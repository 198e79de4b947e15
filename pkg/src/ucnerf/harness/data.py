"""Scene data prepared for training: tensors, near/far, source-view selection."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch

from ..camera import Camera, rotation_angle
from ..synthscene import Dataset, load_dataset


def select_source_views(tgt_cam: Camera, cameras: list[Camera], n: int, candidates=None,
                        exclude=None) -> list[int]:
    """Indices of the ``n`` candidate cameras closest to ``tgt_cam``.

    Ordered by camera-center distance, then rotation angle, then index.
    ``exclude`` (typically the target's own index) is never returned.
    """
    idx = list(range(len(cameras))) if candidates is None else list(candidates)
    if exclude is not None:
        idx = [i for i in idx if i != exclude]
    if n > len(idx):
        raise ValueError(f"requested {n} source views but only {len(idx)} are available")
    c = tgt_cam.center

    def key(i):
        cam = cameras[i]
        return (round(float(np.linalg.norm(cam.center - c)), 12), round(rotation_angle(cam.rotation, tgt_cam.rotation), 12), i)

    return sorted(idx, key=key)[:n]


def sparse_near_far(sparse: list, indices, padding=(0.9, 1.1)) -> tuple[float, float]:
    depths = np.concatenate([sparse[i].depth for i in indices])
    return float(padding[0] * depths.min()), float(padding[1] * depths.max())


def dataset_fingerprint(ds: Dataset) -> str:
    h = hashlib.sha256()
    views = ds.views
    h.update(json.dumps([c.to_dict() for c in views.cameras], sort_keys=True).encode())
    h.update(json.dumps(list(views.split)).encode())
    for i in range(len(views)):
        h.update(np.ascontiguousarray(views.images[i], dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(views.gt_depth[i], dtype=np.float32).tobytes())
        sp = ds.sparse[i]
        for a in (sp.u, sp.v, sp.depth, sp.omega):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(np.ascontiguousarray(ds.prior[i].depth, dtype=np.float32).tobytes())
    return h.hexdigest()[:16]


@dataclass
class SceneData:
    dataset: Dataset
    images: torch.Tensor  # (V, 3, H, W) float32
    train: list
    test: list
    near: float
    far: float
    fingerprint: str

    @property
    def cameras(self) -> list[Camera]:
        return self.dataset.views.cameras

    @property
    def width(self) -> int:
        return self.cameras[0].width

    @property
    def height(self) -> int:
        return self.cameras[0].height

    def sources_for(self, view: int, n: int) -> list[int]:
        n = min(n, len(self.train) - (1 if view in self.train else 0))
        return select_source_views(self.cameras[view], self.cameras, n, self.train, exclude=view)


def prepare_scene(dataset, train_views: int = 0, padding=(0.9, 1.1)) -> SceneData:
    """Wrap a dataset (or a dataset directory) for training and evaluation.

    ``train_views`` > 0 keeps only the first that many training views.
    Near/far are the padded SfM depth range over the kept training views.
    """
    ds = load_dataset(dataset) if not isinstance(dataset, Dataset) else dataset
    train = ds.views.indices("train")
    if train_views:
        if train_views > len(train):
            raise ValueError(f"train_views={train_views} exceeds the {len(train)} training views")
        train = train[:train_views]
    if len(train) < 2:
        raise ValueError("need at least two training views")
    test = ds.views.indices("test")
    near, far = sparse_near_far(ds.sparse, train, padding)
    images = torch.stack([torch.as_tensor(np.asarray(im, dtype=np.float32)).permute(2, 0, 1) for im in ds.views.images])
    return SceneData(ds, images, train, test, near, far, dataset_fingerprint(ds))

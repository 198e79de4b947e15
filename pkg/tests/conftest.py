import numpy as np
import pytest
import torch

from ucnerf.camera import Camera, look_at
from ucnerf.synthscene import SceneRecipe, SceneSpec, export_dataset, generate_dataset


def make_camera(center=(0.0, 0.0, -2.0), target=(0.0, 0.0, 0.0), w=16, h=12, f=20.0):
    R, t = look_at(np.asarray(center, dtype=float), np.asarray(target, dtype=float), up=(0, -1, 0))
    return Camera(f, f, w / 2, h / 2, R, t, w, h)


def tiny_recipe(seed=0, n_views=8, **kw):
    """A fast dataset: 32x24 pixels, few views, coarse quadrature."""
    return SceneRecipe(scene=SceneSpec(seed=seed), n_views=n_views, arc_degrees=30.0, width=32, height=24,
                       n_sparse=60, n_quadrature=256, **kw)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(tiny_recipe())


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_dataset):
    path = tmp_path_factory.mktemp("tiny_scene")
    export_dataset(tiny_dataset.views, tiny_dataset.sparse, tiny_dataset.prior, path, tiny_dataset.meta)
    return path


@pytest.fixture
def camera():
    return make_camera()


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield

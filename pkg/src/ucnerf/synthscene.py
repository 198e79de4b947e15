"""Procedural scenes with known geometry, appearance and photometric inconsistency.

A scene is a "tissue wall" plus protruding bumps, all Gaussian density
blobs, textured with a sinusoidal albedo and lit by a light co-located with
the camera, which produces view-dependent specular highlights inside a
configurable sub-box. Cameras sit on a short arc, as for an endoscope with
constrained motion. From a scene we render ground-truth images/depths and
simulate the two depth priors the training losses consume: sparse SfM-like
depth with reprojection errors, and an affine-corrupted monocular depth.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io as fio
from .camera import Camera, look_at
from .oracle import OracleConfig, dense_quadrature_render

log = logging.getLogger(__name__)

SPLITS = ("train", "test")


class SceneSpecError(ValueError):
    """Invalid scene specification; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    n_blobs: int = 6
    specular_strength: float = 0.8
    specular_region: tuple = ((0.0, -1.0, -1.0), (1.0, 0.1, 1.0))
    texture_freq: float = 2.0

    def validate(self) -> None:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        if lo.shape != (3,) or hi.shape != (3,):
            raise SceneSpecError("bounds", "expected a pair of 3-vectors")
        if not np.all(hi > lo):
            raise SceneSpecError("bounds", f"degenerate box {lo.tolist()} .. {hi.tolist()}")
        if int(self.n_blobs) < 1:
            raise SceneSpecError("n_blobs", f"must be >= 1, got {self.n_blobs}")
        if not self.specular_strength >= 0:
            raise SceneSpecError("specular_strength", f"must be >= 0, got {self.specular_strength}")
        slo, shi = (np.asarray(b, dtype=np.float64) for b in self.specular_region)
        if slo.shape != (3,) or shi.shape != (3,) or not np.all(shi >= slo):
            raise SceneSpecError("specular_region", "expected an ordered pair of 3-vectors")
        if np.any(slo < lo - 1e-12) or np.any(shi > hi + 1e-12):
            raise SceneSpecError("specular_region", "must lie inside bounds")
        if not self.texture_freq > 0:
            raise SceneSpecError("texture_freq", f"must be positive, got {self.texture_freq}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = [list(map(float, b)) for b in self.bounds]
        d["specular_region"] = [list(map(float, b)) for b in self.specular_region]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        for key in ("bounds", "specular_region"):
            if key in d:
                d[key] = tuple(tuple(float(v) for v in b) for b in d[key])
        return cls(**d)


class GroundTruthField:
    """Analytic density, albedo and specular functions of a scene (numpy, float64)."""

    PEAK_DENSITY = 40.0
    SHININESS = 8.0

    def __init__(self, spec: SceneSpec, centers, scales, amplitudes, tex_dirs, tex_phase, base_color):
        self.spec = spec
        self.centers = np.asarray(centers, dtype=np.float64)
        self.scales = np.asarray(scales, dtype=np.float64)
        self.amplitudes = np.asarray(amplitudes, dtype=np.float64)
        self.tex_dirs = np.asarray(tex_dirs, dtype=np.float64)
        self.tex_phase = np.asarray(tex_phase, dtype=np.float64)
        self.base_color = np.asarray(base_color, dtype=np.float64)
        self.region_lo, self.region_hi = (np.asarray(b, dtype=np.float64) for b in spec.specular_region)

    def _blob_terms(self, x):
        diff = (x[..., None, :] - self.centers) / self.scales  # (..., B, 3)
        return diff, self.amplitudes * np.exp(-0.5 * np.sum(diff * diff, axis=-1))

    def density(self, x) -> np.ndarray:
        _, terms = self._blob_terms(np.asarray(x, dtype=np.float64))
        return terms.sum(axis=-1)

    def density_grad(self, x) -> np.ndarray:
        diff, terms = self._blob_terms(np.asarray(x, dtype=np.float64))
        return -np.sum(terms[..., None] * diff / self.scales, axis=-2)

    def albedo(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        f = 2.0 * np.pi * self.spec.texture_freq
        # two plane waves per channel
        waves = np.sin(f * np.einsum("...j,cwj->...cw", x, self.tex_dirs) + self.tex_phase)
        return np.clip(self.base_color + 0.15 * waves.sum(axis=-1), 0.0, 1.0)

    def in_specular_region(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.all((x >= self.region_lo) & (x <= self.region_hi), axis=-1)

    def specular(self, x, d) -> np.ndarray:
        """Additive highlight for a light co-located with the viewer.

        Clamped so that ``albedo + specular`` stays inside [0, 1]; exactly zero
        outside the specular region or when the strength is zero.
        """
        x = np.asarray(x, dtype=np.float64)
        d = np.broadcast_to(np.asarray(d, dtype=np.float64), x.shape)
        out = np.zeros(x.shape[:-1] + (3,))
        if self.spec.specular_strength == 0:
            return out
        mask = self.in_specular_region(x)
        if not mask.any():
            return out
        xs, ds = x[mask], d[mask]
        g = self.density_grad(xs)
        normal = -g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
        facing = np.clip(-np.sum(normal * ds, axis=-1), 0.0, 1.0)
        raw = self.spec.specular_strength * facing**self.SHININESS
        headroom = 1.0 - self.albedo(xs)
        out[mask] = np.minimum(raw[:, None], headroom)
        return out

    def color(self, x, d) -> np.ndarray:
        return self.albedo(x) + self.specular(x, d)


def make_scene(spec: SceneSpec) -> GroundTruthField:
    """Build the ground-truth field for ``spec``; deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in spec.bounds)
    ext = hi - lo
    mid = (lo + hi) / 2.0

    # blob 0: a broad, thin wall in the back half of the box (cameras look along +z)
    centers = [np.array([mid[0], mid[1], lo[2] + 0.75 * ext[2]])]
    scales = [np.array([3.0 * ext[0], 3.0 * ext[1], 0.075 * ext[2]])]
    for _ in range(int(spec.n_blobs) - 1):
        c = lo + ext * np.array([rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), 0.0])
        c[2] = centers[0][2] - ext[2] * rng.uniform(0.05, 0.25)
        centers.append(c)
        scales.append(np.full(3, rng.uniform(0.08, 0.14)) * ext)
    amplitudes = np.full(len(centers), GroundTruthField.PEAK_DENSITY)

    tex_dirs = rng.normal(size=(3, 2, 3))
    tex_dirs /= np.linalg.norm(tex_dirs, axis=-1, keepdims=True)
    tex_phase = rng.uniform(0, 2 * np.pi, size=(3, 2))
    base_color = np.array([0.72, 0.38, 0.33]) + rng.uniform(-0.05, 0.05, size=3)
    return GroundTruthField(spec, centers, scales, amplitudes, tex_dirs, tex_phase, base_color)


def sample_camera_arc(
    spec: SceneSpec,
    n: int,
    arc_degrees: float,
    width: int = 64,
    height: int = 48,
    radius: float | None = None,
    focal: float | None = None,
) -> list[Camera]:
    """Cameras evenly spaced on a horizontal arc, all looking at the box center."""
    if n < 2:
        raise ValueError(f"need at least 2 cameras, got n={n}")
    if not 0 < arc_degrees <= 90:
        raise ValueError(f"arc_degrees must be in (0, 90], got {arc_degrees}")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in spec.bounds)
    center = (lo + hi) / 2.0
    if radius is None:
        radius = 1.25 * float(np.max(hi - lo))
    if focal is None:
        focal = 1.25 * width
    cams = []
    for theta in np.deg2rad(np.linspace(-arc_degrees / 2.0, arc_degrees / 2.0, n)):
        eye = center + radius * np.array([np.sin(theta), 0.0, -np.cos(theta)])
        R, t = look_at(eye, center, up=(0.0, -1.0, 0.0))
        cams.append(
            Camera(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0, rotation=R,
                   translation=t, width=width, height=height)
        )
    return cams


def pixel_centers(width: int, height: int) -> np.ndarray:
    """(H*W, 2) continuous coordinates of all pixel centers, row-major."""
    v, u = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=-1).astype(np.float64)


def camera_rays_numpy(camera: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-space origins and unit directions for continuous pixel coordinates."""
    pixels = np.asarray(pixels, dtype=np.float64)
    cam_dirs = np.stack(
        [(pixels[:, 0] - camera.cx) / camera.fx, (pixels[:, 1] - camera.cy) / camera.fy,
         np.ones(len(pixels))], axis=-1,
    )
    dirs = cam_dirs @ camera.rotation  # R^T applied to row vectors
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return np.broadcast_to(camera.center, dirs.shape).copy(), dirs


def scene_near_far(spec: SceneSpec, camera: Camera) -> tuple[float, float]:
    """z-depth interval enclosing the bounds box, as seen from ``camera``."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in spec.bounds)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    _, z = camera.project(corners)
    return max(float(z.min()), 1e-3), float(z.max())


def render_ground_truth(
    scene: GroundTruthField,
    camera: Camera,
    n_quadrature: int = 512,
    near: float | None = None,
    far: float | None = None,
    background=(0.0, 0.0, 0.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Render an (H, W, 3) image and (H, W) z-depth with the dense midpoint oracle.

    ``near``/``far`` bound the z-depth; each ray is integrated over the
    matching ray-distance interval. Residual transmittance is placed at
    ``far``, so an empty ray reports exactly ``far`` and every depth lies in
    [near, far].
    """
    if n_quadrature < 256:
        raise ValueError(f"n_quadrature must be >= 256, got {n_quadrature}")
    if near is None or far is None:
        n0, f0 = scene_near_far(scene.spec, camera)
        near = n0 if near is None else near
        far = f0 if far is None else far
    origins, dirs = camera_rays_numpy(camera, pixel_centers(camera.width, camera.height))
    cos = dirs @ camera.optical_axis
    res = dense_quadrature_render(
        scene.density, scene.color, origins, dirs, near / cos, far / cos,
        OracleConfig(quadrature_n=max(n_quadrature, 1024)), background=background,
        n_samples=n_quadrature,
    )
    image = np.clip(res.color, 0.0, 1.0).reshape(camera.height, camera.width, 3)
    depth = (res.depth * cos).reshape(camera.height, camera.width)
    return image, depth


def surface_points(camera: Camera, depth: np.ndarray) -> np.ndarray:
    """Back-project a (H, W) z-depth map to world points (H, W, 3)."""
    pix = pixel_centers(camera.width, camera.height)
    cam = np.stack([(pix[:, 0] - camera.cx) / camera.fx, (pix[:, 1] - camera.cy) / camera.fy,
                    np.ones(len(pix))], axis=-1) * np.asarray(depth, dtype=np.float64).reshape(-1, 1)
    pts = (cam - camera.translation) @ camera.rotation
    return pts.reshape(camera.height, camera.width, 3)


# --- simulated priors -------------------------------------------------------


@dataclass
class SparseDepthMap:
    """SfM-like sparse depth: integer pixel indices, z-depth, reprojection error."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    omega: np.ndarray
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.int64).reshape(-1)
        self.v = np.asarray(self.v, dtype=np.int64).reshape(-1)
        self.depth = np.asarray(self.depth, dtype=np.float64).reshape(-1)
        self.omega = np.asarray(self.omega, dtype=np.float64).reshape(-1)
        if not (len(self.u) == len(self.v) == len(self.depth) == len(self.omega)):
            raise ValueError("sparse depth fields have unequal lengths")
        if np.any(self.depth <= 0):
            raise ValueError("sparse depths must be positive")
        if np.any(self.omega < 0):
            raise ValueError("reprojection errors must be non-negative")
        if np.any(self.u < 0) or np.any(self.v < 0):
            raise ValueError("pixel indices must be non-negative")
        if self.width is not None and np.any(self.u >= self.width):
            raise ValueError("u outside image width")
        if self.height is not None and np.any(self.v >= self.height):
            raise ValueError("v outside image height")

    def __len__(self) -> int:
        return len(self.depth)

    @property
    def omega_bar(self) -> float:
        return float(np.mean(self.omega)) if len(self.omega) else 0.0

    @property
    def entries(self) -> list[tuple[int, int, float, float]]:
        return [(int(a), int(b), float(c), float(d)) for a, b, c, d in zip(self.u, self.v, self.depth, self.omega)]

    def weights(self) -> np.ndarray:
        return reprojection_weights(self.omega)


def reprojection_weights(omega, omega_bar=None) -> np.ndarray:
    """Confidence weights exp(-(omega/omega_bar)^2); all ones when omega_bar is 0."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega_bar is None:
        omega_bar = float(np.mean(omega)) if omega.size else 0.0
    if omega_bar == 0.0:
        return np.ones_like(omega)
    return np.exp(-((omega / omega_bar) ** 2))


@dataclass
class PriorDepthMap:
    depth: np.ndarray
    a: float
    b: float


def _texture_strength(image: np.ndarray) -> np.ndarray:
    gray = np.asarray(image, dtype=np.float64) @ np.array([0.299, 0.587, 0.114])
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = gray[:, 2:] - gray[:, :-2]
    gy[1:-1, :] = gray[2:, :] - gray[:-2, :]
    return np.hypot(gx, gy)


def make_sparse_depth(
    gt_depth: np.ndarray,
    camera: Camera,
    n_points: int,
    noise_sigma: float,
    seed,
    image: np.ndarray | None = None,
    valid: np.ndarray | None = None,
    omega_scale: float = 1.0,
) -> SparseDepthMap:
    """Sample SfM-like points, preferring strongly textured pixels.

    Depths get multiplicative Gaussian noise of relative scale
    ``noise_sigma``; the reprojection error of each point is proportional to
    the magnitude of the injected noise.
    """
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    h, w = gt_depth.shape
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")
    if n_points > h * w:
        raise ValueError(f"n_points={n_points} exceeds pixel count {h * w}")
    rng = np.random.default_rng(seed)
    if image is not None:
        score = _texture_strength(image).ravel()
        score = score + 1e-3 * max(score.max(), 1e-12)
    else:
        score = np.ones(h * w)
    if valid is not None:
        score = score * np.asarray(valid, dtype=bool).ravel()
        if np.count_nonzero(score) < n_points:
            raise ValueError("not enough valid pixels for the requested number of points")
    idx = rng.choice(h * w, size=n_points, replace=False, p=score / score.sum())
    idx.sort()
    v, u = np.divmod(idx, w)
    gt = gt_depth.ravel()[idx]
    noise = rng.normal(size=n_points) * noise_sigma * gt
    depth = np.maximum(gt + noise, 1e-6 * gt)
    omega = omega_scale * np.abs(noise)
    return SparseDepthMap(u=u, v=v, depth=depth, omega=omega, width=camera.width, height=camera.height)


def make_prior_depth(gt_depth: np.ndarray, a: float, b: float, noise_sigma: float, seed) -> PriorDepthMap:
    """Monocular-prior stand-in: ``a * depth + b`` plus Gaussian noise."""
    if not a > 0:
        raise ValueError(f"prior scale a must be positive, got {a}")
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=gt_depth.shape) * noise_sigma if noise_sigma > 0 else 0.0
    return PriorDepthMap(depth=a * gt_depth + b + noise, a=float(a), b=float(b))


# --- datasets -----------------------------------------------------------------


@dataclass
class ViewSet:
    cameras: list
    images: list
    gt_depth: list
    split: list

    def __post_init__(self):
        n = len(self.cameras)
        if not (len(self.images) == len(self.gt_depth) == len(self.split) == n):
            raise ValueError("ViewSet fields have unequal lengths")
        for s in self.split:
            if s not in SPLITS:
                raise ValueError(f"unknown split tag {s!r}")

    def __len__(self):
        return len(self.cameras)

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == split]


@dataclass
class Dataset:
    views: ViewSet
    sparse: list
    prior: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.views)


@dataclass(frozen=True)
class SceneRecipe:
    """Everything needed to generate a dataset directory from scratch."""

    scene: SceneSpec = SceneSpec()
    n_views: int = 20
    arc_degrees: float = 40.0
    width: int = 64
    height: int = 48
    n_sparse: int = 150
    sparse_noise: float = 0.02
    prior_noise: float = 0.01
    n_quadrature: int = 512

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneRecipe":
        d = dict(d)
        d["scene"] = SceneSpec.from_dict(d.get("scene", {}))
        return cls(**d)


def reference_recipe(seed: int = 0, **overrides) -> SceneRecipe:
    """The desk-scale reference scene: 64x48, 20 views, interleaved train/test."""
    scene = SceneSpec(seed=seed)
    return SceneRecipe(scene=scene, **overrides)


def generate_dataset(recipe: SceneRecipe) -> Dataset:
    """Render all views and simulate priors; pure function of the recipe."""
    scene = make_scene(recipe.scene)
    cams = sample_camera_arc(recipe.scene, recipe.n_views, recipe.arc_degrees, recipe.width, recipe.height)
    seeds = np.random.SeedSequence(recipe.scene.seed).spawn(len(cams))
    images, depths, sparse, prior, split = [], [], [], [], []
    for i, cam in enumerate(cams):
        img, depth = render_ground_truth(scene, cam, recipe.n_quadrature)
        rng = np.random.default_rng(seeds[i])
        sp = make_sparse_depth(depth, cam, recipe.n_sparse, recipe.sparse_noise,
                               rng.integers(2**63), image=img)
        a = float(rng.uniform(0.5, 2.0))
        b = float(rng.uniform(-1.0, 1.0))
        pr = make_prior_depth(depth, a, b, recipe.prior_noise, rng.integers(2**63))
        images.append(img)
        depths.append(depth)
        sparse.append(sp)
        prior.append(pr)
        split.append("train" if i % 2 == 0 else "test")
        log.debug("rendered view %d/%d", i + 1, len(cams))
    views = ViewSet(cameras=cams, images=images, gt_depth=depths, split=split)
    meta = {"recipe": recipe.to_dict(), "prior_affine": [[p.a, p.b] for p in prior]}
    return Dataset(views=views, sparse=sparse, prior=prior, meta=meta)


def export_dataset(views: ViewSet, sparse: list, prior: list, path, meta: dict | None = None) -> Path:
    """Write the on-disk dataset layout (creating ``path`` if needed).

    Layout::

        cameras.json          list of {fx, fy, cx, cy, width, height, R[9], t[3]}
        images/0000.png       8-bit RGB
        depth/0000.pfm        float32 z-depth
        sparse/0000.txt       lines "u v depth omega"
        prior/0000.pfm        float32 monocular prior
        split.json            {"0": "train", ...}
        meta.json             optional generation metadata
    """
    root = Path(path)
    try:
        for sub in ("images", "depth", "sparse", "prior"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {root}: {e}") from e
    fio.write_json(root / "cameras.json", [c.to_dict() for c in views.cameras])
    fio.write_json(root / "split.json", {str(i): s for i, s in enumerate(views.split)})
    for i in range(len(views)):
        name = f"{i:04d}"
        fio.write_png(root / "images" / f"{name}.png", views.images[i])
        fio.write_pfm(root / "depth" / f"{name}.pfm", views.gt_depth[i])
        fio.write_pfm(root / "prior" / f"{name}.pfm", prior[i].depth)
        sp = sparse[i]
        lines = [f"{int(u)} {int(v)} {float(d)!r} {float(o)!r}" for u, v, d, o in zip(sp.u, sp.v, sp.depth, sp.omega)]
        try:
            (root / "sparse" / f"{name}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
        except OSError as e:
            raise OSError(f"cannot write sparse file for view {i} in {root}: {e}") from e
    if meta is not None:
        fio.write_json(root / "meta.json", meta)
    return root


def read_sparse(path, width=None, height=None) -> SparseDepthMap:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        return SparseDepthMap(u=[], v=[], depth=[], omega=[], width=width, height=height)
    u, v, d, o = zip(*rows)
    return SparseDepthMap(
        u=[int(float(x)) for x in u], v=[int(float(x)) for x in v],
        depth=[float(x) for x in d], omega=[float(x) for x in o], width=width, height=height,
    )


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "cameras.json").exists():
        raise FileNotFoundError(f"no cameras.json in dataset directory {root}")
    cams = [Camera.from_dict(d) for d in fio.read_json(root / "cameras.json")]
    split_map = fio.read_json(root / "split.json")
    split = [split_map[str(i)] for i in range(len(cams))]
    meta = fio.read_json(root / "meta.json") if (root / "meta.json").exists() else {}
    affine = meta.get("prior_affine")
    images, depths, sparse, prior = [], [], [], []
    for i, cam in enumerate(cams):
        name = f"{i:04d}"
        images.append(fio.read_png(root / "images" / f"{name}.png").astype(np.float32) / 255.0)
        depths.append(fio.read_pfm(root / "depth" / f"{name}.pfm"))
        sparse.append(read_sparse(root / "sparse" / f"{name}.txt", cam.width, cam.height))
        a, b = affine[i] if affine else (float("nan"), float("nan"))
        prior.append(PriorDepthMap(depth=fio.read_pfm(root / "prior" / f"{name}.pfm"), a=a, b=b))
    views = ViewSet(cameras=cams, images=images, gt_depth=depths, split=split)
    return Dataset(views=views, sparse=sparse, prior=prior, meta=meta)

"""Registry of finite-difference gradient checks for every differentiable operation.

Each check builds a small random double-precision problem from a seed and
exposes it as a scalar function of a flat parameter vector. Problems with
many inputs are probed along a handful of random directions, which keeps
the finite-difference loop cheap while still exercising every input.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import distill, field, raycore, sweep
from .camera import Camera, look_at
from .oracle import OracleConfig, finite_diff_grad

DTYPE = torch.float64
MAX_DIRECT = 48  # inputs above this size are probed along random directions
N_DIRECTIONS = 6
MAX_REDRAWS = 20  # redraws of a test point whose probes straddle a ReLU kink


@dataclass
class Problem:
    f: Callable[[torch.Tensor], torch.Tensor]  # flat double tensor -> scalar tensor
    x0: np.ndarray
    nets: tuple = ()  # modules whose ReLUs must stay away from their kink at x0


@dataclass(frozen=True)
class GradCheck:
    name: str
    module: str
    build: Callable[[np.random.Generator], Problem]


@dataclass
class CheckResult:
    name: str
    module: str
    n_inputs: int
    max_rel_err: float
    passed: bool
    seconds: float


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def _project(problem: Problem, rng: np.random.Generator) -> Problem:
    """Restrict a large problem to a random low-dimensional affine slice."""
    n = problem.x0.size
    if n <= MAX_DIRECT:
        return problem
    V = torch.as_tensor(rng.normal(size=(N_DIRECTIONS, n)) / np.sqrt(n), dtype=DTYPE)
    base = torch.as_tensor(problem.x0, dtype=DTYPE)

    def f(a):
        return problem.f(base + a @ V)

    return Problem(f, np.zeros(N_DIRECTIONS), problem.nets)


def _relu_pattern(problem: Problem, x: np.ndarray) -> torch.Tensor:
    signs = []

    def hook(_module, inputs, _output):
        signs.append((inputs[0].detach() > 0).flatten())

    handles = [m.register_forward_hook(hook) for net in problem.nets for m in net.modules()
               if isinstance(m, torch.nn.ReLU)]
    try:
        with torch.no_grad():
            problem.f(torch.as_tensor(x, dtype=DTYPE))
    finally:
        for h in handles:
            h.remove()
    return torch.cat(signs) if signs else torch.zeros(0, dtype=torch.bool)


def crosses_kink(problem: Problem, step: float) -> bool:
    """True if some finite-difference probe flips the sign of a ReLU input.

    A central difference across a ReLU kink measures a one-sided mixture
    rather than the gradient, so such test points are redrawn.
    """
    if not problem.nets:
        return False
    base = _relu_pattern(problem, problem.x0)
    for i in range(problem.x0.size):
        for sgn in (1.0, -1.0):
            x = problem.x0.astype(np.float64).copy()
            x.flat[i] += sgn * step
            if not torch.equal(_relu_pattern(problem, x), base):
                return True
    return False


def check_problem(problem: Problem, cfg: OracleConfig = OracleConfig()) -> float:
    x = torch.as_tensor(problem.x0, dtype=DTYPE).clone().requires_grad_(True)
    y = problem.f(x)
    (g,) = torch.autograd.grad(y, x, allow_unused=True)
    analytic = np.zeros_like(problem.x0) if g is None else g.detach().numpy()

    def scalar(v):
        with torch.no_grad():
            return float(problem.f(torch.as_tensor(v, dtype=DTYPE)))

    numeric = finite_diff_grad(scalar, problem.x0, cfg)
    return relative_error(analytic, numeric)


def _weights(rng, shape):
    return torch.as_tensor(rng.normal(size=shape), dtype=DTYPE)


def _split(x, shapes):
    out, i = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(x[i:i + n].reshape(s))
        i += n
    return out


def _seeded_module(rng, ctor):
    with torch.random.fork_rng():
        torch.manual_seed(int(rng.integers(2**31)))
        return ctor().to(DTYPE)


# --- raycore -------------------------------------------------------------------------


def _pe(rng):
    L = int(rng.integers(1, 5))
    r = _weights(rng, 3 * (1 + 2 * L))
    return Problem(lambda x: (r * raycore.positional_encode(x, L)).sum(), rng.uniform(-1, 1, 3))


def _batch(rng, n):
    t = np.sort(rng.uniform(1.0, 2.0, n))
    t = t + np.arange(n) * 1e-3
    return torch.as_tensor(t, dtype=DTYPE), torch.as_tensor(raycore.deltas(torch.as_tensor(t), 2.1).numpy(), dtype=DTYPE)


def _transmittance(rng):
    n = int(rng.integers(2, 12))
    _, delta = _batch(rng, n)
    r = _weights(rng, n)
    return Problem(lambda s: (r * raycore.transmittance(s, delta)).sum(), rng.uniform(0.1, 5.0, n))


def _composite_color(rng):
    n = int(rng.integers(2, 10))
    t, delta = _batch(rng, n)
    r = _weights(rng, 3)
    bg = rng.uniform(0, 1, 3)

    def f(x):
        s, c = _split(x, [(n,), (n, 3)])
        return (r * raycore.composite_color(raycore.SampleBatch(t, delta, s, c), background=bg)).sum()

    return Problem(f, np.concatenate([rng.uniform(0.1, 5.0, n), rng.uniform(0, 1, 3 * n)]))


def _composite_depth(rng):
    n = int(rng.integers(2, 12))
    t, delta = _batch(rng, n)
    c = torch.zeros(n, 3, dtype=DTYPE)
    return Problem(lambda s: raycore.composite_depth(raycore.SampleBatch(t, delta, s, c)), rng.uniform(0.1, 5.0, n))


# --- sweep ---------------------------------------------------------------------------


def _small_cams(rng, n_src=2, w=8, h=8):
    tgt_center = np.array([0.0, 0.0, -2.0])
    R, t = look_at(tgt_center, np.zeros(3), up=(0, -1, 0))
    tgt = Camera(10.0, 10.0, w / 2, h / 2, R, t, w, h)
    srcs = []
    for _ in range(n_src):
        c = tgt_center + rng.uniform(-0.15, 0.15, 3) * np.array([1, 1, 0.2])
        R, t = look_at(c, rng.uniform(-0.05, 0.05, 3), up=(0, -1, 0))
        srcs.append(Camera(10.0, 10.0, w / 2, h / 2, R, t, w, h))
    return tgt, srcs


def _features(rng):
    net = _seeded_module(rng, lambda: sweep.FeatureNet(z=4, base=4))
    shape = (2, 3, 8, 8)
    r = [_weights(rng, (2, sweep.stage_channels(4, k), 8 // sweep.stage_factor(k), 8 // sweep.stage_factor(k)))
         for k in range(3)]

    def f(x):
        feats = net(x.reshape(shape))
        return sum((ri * fi).sum() for ri, fi in zip(r, feats))

    return Problem(f, rng.uniform(0, 1, int(np.prod(shape))), (net,))


def _warp(rng):
    tgt, (src,) = _small_cams(rng, 1)
    d = float(rng.uniform(1.5, 2.5))
    shape = (2, 8, 8)
    r = _weights(rng, shape)
    return Problem(lambda x: (r * sweep.homography_warp(x.reshape(shape), src, tgt, d)[0]).sum(),
                   rng.normal(size=int(np.prod(shape))))


def _cost(rng):
    shape = (3, 2, 2, 3, 3)
    masks = torch.as_tensor(rng.uniform(size=(3, 2, 3, 3)) > 0.2)
    r = _weights(rng, (2, 2, 3, 3))
    return Problem(lambda x: (r * sweep.build_cost_volume(x.reshape(shape), masks)[0]).sum(),
                   rng.normal(size=int(np.prod(shape))))


def _regularize(rng):
    net = _seeded_module(rng, lambda: sweep.RegNet(2, 2))
    with torch.no_grad():
        net.to_logit.weight.normal_(0, 0.3)
    shape = (4, 2, 3, 3)
    r1, r2 = _weights(rng, (2, 4, 3, 3)), _weights(rng, (4, 3, 3))

    def f(x):
        S, P = sweep.regularize_volume(net, x.reshape(shape))
        return (r1 * S).sum() + (r2 * P).sum()

    return Problem(f, rng.uniform(0, 0.2, int(np.prod(shape))), (net,))


def _expect(rng):
    d = torch.as_tensor(np.sort(rng.uniform(1, 3, (6, 2, 2)), axis=0), dtype=DTYPE)
    r = _weights(rng, (2, 2))
    return Problem(lambda x: (r * sweep.expect_depth(torch.softmax(x.reshape(6, 2, 2), 0), d)).sum(),
                   rng.normal(size=24))


class _Sparse:
    def __init__(self, rng, n, w, h):
        self.u = rng.integers(0, w, n)
        self.v = rng.integers(0, h, n)
        self.depth = rng.uniform(1, 3, n)
        self.omega = rng.uniform(0, 1, n)


def _consistency(rng):
    w, h = 16, 12
    shapes = [(h // 4, w // 4), (h // 2, w // 2), (h, w)]
    sp = _Sparse(rng, int(rng.integers(1, 20)), w, h)

    def f(x):
        return sweep.consistency_loss(_split(x, shapes), sp, w, h)

    x0 = np.concatenate([rng.uniform(1, 3, int(np.prod(s))) for s in shapes])
    return Problem(f, x0)


# --- field ---------------------------------------------------------------------------


def _small_context(rng, dtype=DTYPE):
    tgt, srcs = _small_cams(rng, 2)
    grid = sweep.DepthHypothesisGrid(1.5, 2.5, (3, 3, 2))
    vols, hyps = [], []
    prev = None
    for k, c in enumerate((2, 1, 1)):
        f = sweep.stage_factor(k)
        hk = sweep.stage_hypotheses(grid, k, 8 // f, 8 // f, prev, dtype)
        prev = hk.mean(0) + 0.05
        hyps.append(hk)
        vols.append(torch.as_tensor(rng.normal(size=(c, hk.shape[0], 8 // f, 8 // f)), dtype=dtype))
    imgs = torch.as_tensor(rng.uniform(size=(2, 3, 8, 8)), dtype=dtype)
    feats = torch.as_tensor(rng.normal(size=(2, 1, 8, 8)), dtype=dtype)
    return field.ConditionContext(tgt, vols, hyps, imgs, feats, srcs)


def _points(rng, ctx, n):
    pix = rng.uniform(1.0, 7.0, (n, 2))
    rays = raycore.generate_rays(ctx.tgt_cam, pix, 1.6, 2.4)
    t = torch.as_tensor(rng.uniform(0.1, 0.9, n), dtype=DTYPE)
    return rays.origins + (rays.near + t * (rays.far - rays.near))[:, None] * rays.directions


def _gather(rng):
    ctx = _small_context(rng)
    x = _points(rng, ctx, 5)
    shapes = [tuple(v.shape) for v in ctx.volumes] + [tuple(ctx.features.shape)]
    base = field.gather_condition(x, ctx)
    r1, r2 = _weights(rng, base.f_base.shape), _weights(rng, base.f_color.shape)

    def f(p):
        parts = _split(p, shapes)
        c = field.ConditionContext(ctx.tgt_cam, parts[:3], ctx.hypotheses, ctx.images, parts[3], ctx.cameras)
        out = field.gather_condition(x, c)
        return (r1 * out.f_base).sum() + (r2 * out.f_color).sum()

    x0 = np.concatenate([v.numpy().ravel() for v in ctx.volumes] + [ctx.features.numpy().ravel()])
    return Problem(f, x0)


def _tiny_field(rng, n_views=2):
    cfg = field.FieldConfig(n_views=n_views, volume_channels=(2, 1, 1), color_feature_channels=1, trunk_depth=2,
                            trunk_width=16, branch_depth=2, branch_width=8,
                            encoding=raycore.EncodingConfig(2, 1, True))
    return _seeded_module(rng, lambda: field.RadianceField(cfg))


def _trunk(rng):
    net = _tiny_field(rng)
    dx, db = net.cfg.encoding.pos_dim(), net.cfg.base_dim
    r = _weights(rng, (3, net.cfg.trunk_width))
    return Problem(lambda x: (r * net.trunk(*_split(x, [(3, dx), (3, db)]))).sum(), rng.normal(size=3 * (dx + db)),
                   (net,))


def _base(rng):
    net = _tiny_field(rng)
    r1, r2 = _weights(rng, (3, 3)), _weights(rng, 3)

    def f(h):
        c, s = net.base_branch(h.reshape(3, -1))
        return (r1 * c).sum() + (r2 * s).sum()

    return Problem(f, rng.uniform(0, 1, 3 * net.cfg.trunk_width), (net,))


def _adaptive(rng):
    net = _tiny_field(rng)
    cfg = net.cfg
    shapes = [(2, cfg.trunk_width), (2, cfg.encoding.dir_dim()), (2, cfg.color_dim)]
    r1, r2 = _weights(rng, (2, 3)), _weights(rng, 2)

    def f(x):
        c, s = net.adaptive_branch(*_split(x, shapes))
        return (r1 * c).sum() + (r2 * s).sum()

    return Problem(f, rng.uniform(0, 1, sum(int(np.prod(s)) for s in shapes)), (net,))


def _fuse(rng):
    mode = ("paper", "swapped")[int(rng.integers(2))]
    r1, r2 = _weights(rng, (4, 3)), _weights(rng, 4)
    shapes = [(4, 3), (4,), (4, 3), (4,), (4,)]

    def f(x):
        c_b, s_b, c_a, s_a, U = _split(x, shapes)
        c, s = field.fuse(c_b, s_b, c_a, s_a, U, mode)
        return (r1 * c).sum() + (r2 * s).sum()

    x0 = np.concatenate([rng.uniform(0, 1, 12), rng.uniform(0, 3, 4), rng.uniform(0, 1, 12), rng.uniform(0, 3, 4),
                         rng.uniform(0.05, 0.95, 4)])
    return Problem(f, x0)


def _render(rng):
    ctx = _small_context(rng)
    net = _tiny_field(rng)
    w0 = net.trunk_net[0].weight.detach().clone()
    pixel = rng.uniform(1.0, 7.0, 2)
    U = float(rng.uniform(0, 1))
    r = _weights(rng, 3)
    gen_seed = int(rng.integers(2**31))
    return Problem(lambda x: _render_with_weight(net, x.reshape(w0.shape), ctx, pixel, U, r, gen_seed),
                   w0.numpy().ravel().copy(), (net,))


def _render_with_weight(net, weight, ctx, pixel, U, r, gen_seed):
    """Render one pixel with the first trunk weight replaced by ``weight``."""
    layer = net.trunk_net[0]
    saved = layer.weight
    del layer.weight
    layer.weight = weight
    try:
        gen = torch.Generator().manual_seed(gen_seed)
        color, depth = field.render_pixel(net, ctx.tgt_cam, pixel, U, ctx, 1.6, 2.4, n_samples=16, generator=gen)
    finally:
        del layer.weight
        layer.weight = saved
    return (r * color).sum() + 0.1 * depth


# --- distill -------------------------------------------------------------------------


def _rgb(rng):
    n = int(rng.integers(1, 8))
    target = torch.as_tensor(rng.uniform(0, 1, (n, 3)), dtype=DTYPE)
    return Problem(lambda x: distill.rgb_loss(x.reshape(n, 3), target), rng.uniform(0, 1, 3 * n))


def _scale(rng):
    n = int(rng.integers(1, 16))
    target = rng.uniform(1, 3, n)
    omega = rng.uniform(0, 1, n)
    return Problem(lambda x: distill.scale_loss(x, target, omega), target + rng.normal(0, 0.3, n))


def _grad(rng):
    n = int(rng.integers(1, 4))
    prior = torch.as_tensor(rng.uniform(1, 3, (n, 6, 6)), dtype=DTYPE)
    return Problem(lambda x: distill.grad_loss(x.reshape(n, 6, 6), prior)[0], rng.uniform(1, 3, n * 36))


def _smooth(rng):
    n = int(rng.integers(1, 4))
    prior = torch.as_tensor(rng.uniform(1, 3, (n, 6, 6)), dtype=DTYPE)
    cfg = distill.SmoothnessConfig(float(rng.uniform(0.5, 2)))
    return Problem(lambda x: distill.smooth_loss(x.reshape(n, 6, 6), prior, cfg, scale=3.0), rng.uniform(1, 3, n * 36))


def _total(rng):
    w = distill.LossWeights(*rng.uniform(0, 10, 5))
    return Problem(lambda x: distill.total_loss(dict(zip(distill.COMPONENTS, x)), w), rng.uniform(0, 2, 5))


REGISTRY: list[GradCheck] = [
    GradCheck("positional_encode", "raycore", _pe),
    GradCheck("transmittance", "raycore", _transmittance),
    GradCheck("composite_color", "raycore", _composite_color),
    GradCheck("composite_depth", "raycore", _composite_depth),
    GradCheck("extract_features", "sweep", _features),
    GradCheck("homography_warp", "sweep", _warp),
    GradCheck("build_cost_volume", "sweep", _cost),
    GradCheck("regularize_volume", "sweep", _regularize),
    GradCheck("expect_depth", "sweep", _expect),
    GradCheck("consistency_loss", "sweep", _consistency),
    GradCheck("gather_condition", "field", _gather),
    GradCheck("trunk", "field", _trunk),
    GradCheck("base_branch", "field", _base),
    GradCheck("adaptive_branch", "field", _adaptive),
    GradCheck("fuse", "field", _fuse),
    GradCheck("render_pixel", "field", _render),
    GradCheck("rgb_loss", "distill", _rgb),
    GradCheck("scale_loss", "distill", _scale),
    GradCheck("grad_loss", "distill", _grad),
    GradCheck("smooth_loss", "distill", _smooth),
    GradCheck("total_loss", "distill", _total),
]


def run_checks(n_inputs: int = 100, seed: int = 0, tol: float = 1e-4, names=None,
               cfg: OracleConfig = OracleConfig()) -> list[CheckResult]:
    results = []
    for check in REGISTRY:
        if names and check.name not in names:
            continue
        t0 = time.perf_counter()
        worst = 0.0
        for i in range(n_inputs):
            for attempt in range(MAX_REDRAWS):
                rng = np.random.default_rng([seed, i, zlib.crc32(check.name.encode()), attempt])
                problem = _project(check.build(rng), rng)
                if not crosses_kink(problem, cfg.fd_step):
                    break
            worst = max(worst, check_problem(problem, cfg))
        results.append(CheckResult(check.name, check.module, n_inputs, worst, worst < tol,
                                   time.perf_counter() - t0))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'operation':<20} {'module':<8} {'inputs':>6} {'max rel err':>12}  result"]
    for r in results:
        lines.append(f"{r.name:<20} {r.module:<8} {r.n_inputs:>6} {r.max_rel_err:>12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)

import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from ucnerf import sweep
from ucnerf.camera import Camera
from ucnerf.oracle import brute_expectation
from ucnerf.sweep import (
    Cascade,
    DepthHypothesisGrid,
    FeatureNet,
    RegNet,
    build_cost_volume,
    consistency_loss,
    expect_depth,
    extract_features,
    homography_warp,
    regularize_volume,
    run_cascade,
    stage_hypotheses,
    uncertainty_map,
)

D = torch.float64


def fronto_camera(x=0.0, y=0.0, w=32, h=32, f=32.0):
    return Camera(f, f, w / 2, h / 2, np.eye(3), -np.array([x, y, 0.0]), w, h)


def plane_image(cam, depth):
    """Analytic texture of the plane z = depth as seen by a fronto-parallel camera."""
    v, u = np.meshgrid(np.arange(cam.height) + 0.5, np.arange(cam.width) + 0.5, indexing="ij")
    X = (u - cam.cx) / cam.fx * depth + cam.center[0]
    Y = (v - cam.cy) / cam.fy * depth + cam.center[1]
    r = 0.5 + 0.25 * np.sin(7 * X) * np.cos(5 * Y) + 0.2 * np.sin(13 * X + 3 * Y)
    g = 0.5 + 0.3 * np.cos(11 * Y - 2 * X)
    b = 0.5 + 0.3 * np.sin(9 * X * Y + 1)
    return np.stack([r, g, b], -1).astype(np.float32)


class PooledColors(nn.Module):
    """Noise-free features: the image itself, average-pooled to each stage."""

    def __init__(self, z=8):
        super().__init__()
        self.z = z
        self.anchor = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        out = []
        for k in range(sweep.N_STAGES):
            f = sweep.stage_factor(k)
            y = F.avg_pool2d(x, f) if f > 1 else x
            idx = [i % 3 for i in range(sweep.stage_channels(self.z, k))]
            out.append(y[:, idx] + 0 * self.anchor)
        return out


class TestFeatures:
    def test_stage_shapes(self):
        net = FeatureNet(z=8)
        pyr = extract_features(net, [torch.rand(48, 64, 3), torch.rand(48, 64, 3)])
        assert [tuple(s.shape[-2:]) for s in pyr[0].stages] == [(12, 16), (24, 32), (48, 64)]
        assert [s.shape[0] for s in pyr[0].stages] == [8, 4, 2]

    def test_identical_images(self):
        img = torch.rand(3, 16, 16)
        pyr = extract_features(FeatureNet(), [img, img.clone()])
        assert all(torch.equal(a, b) for a, b in zip(pyr[0].stages, pyr[1].stages))

    def test_parameter_sensitivity(self):
        torch.manual_seed(0)
        net = FeatureNet()
        imgs = [torch.rand(3, 16, 16) for _ in range(2)]
        before = extract_features(net, imgs)[0][2].clone()
        with torch.no_grad():
            net.conv0[0][0].weight[0, 0, 1, 1] += 0.1
        assert not torch.equal(before, extract_features(net, imgs)[0][2])

    @pytest.mark.parametrize("imgs", [[torch.rand(3, 16, 16)], [torch.rand(3, 16, 16), torch.rand(3, 16, 20)],
                                      [torch.rand(3, 18, 16), torch.rand(3, 18, 16)]])
    def test_invalid(self, imgs):
        with pytest.raises(ValueError):
            extract_features(FeatureNet(), imgs)


class TestWarp:
    def test_identity_pose(self):
        cam = fronto_camera(w=16, h=12, f=14.0)
        feat = torch.rand(3, 12, 16, dtype=D)
        for d in (0.5, 1.7, 40.0):
            w, valid = homography_warp(feat, cam, cam, d)
            assert bool(valid.all())
            assert float((w - feat).abs().max()) < 1e-12

    def test_x_baseline_shift(self):
        b, d = 0.3, 2.0
        tgt, src = fronto_camera(), fronto_camera(x=b)
        ramp = torch.arange(32, dtype=D) + 0.5
        feat = ramp.expand(32, 32)[None].clone()  # feature value = u coordinate
        w, valid = homography_warp(feat, src, tgt, d)
        interior = valid.clone()
        interior[:, :2] = interior[:, -2:] = False
        shift = (feat - w)[0][interior]
        assert float((shift - tgt.fx * b / d).abs().max()) < 1e-4

    def test_infinite_plane_no_shift(self):
        tgt, src = fronto_camera(), fronto_camera(x=0.3)
        feat = torch.rand(2, 32, 32, dtype=D)
        w, _ = homography_warp(feat, src, tgt, 1e9)
        assert float((w - feat).abs().max()) < 1e-6

    def test_out_of_view_zero(self):
        tgt, src = fronto_camera(), fronto_camera(x=5.0)
        w, valid = homography_warp(torch.ones(1, 32, 32, dtype=D), src, tgt, 1.0)
        assert not bool(valid.any()) and float(w.abs().max()) == 0.0

    def test_bad_depth(self):
        cam = fronto_camera()
        with pytest.raises(ValueError):
            homography_warp(torch.zeros(1, 32, 32), cam, cam, 0.0)


class TestCost:
    def test_identical_views(self):
        f = torch.rand(1, 2, 3, 4, 4, dtype=D)
        cost, flagged = build_cost_volume(f.expand(3, -1, -1, -1, -1), torch.ones(3, 2, 4, 4, dtype=torch.bool))
        assert float(cost.abs().max()) < 1e-15 and not bool(flagged.any())

    def test_two_point_variance(self):
        f = torch.randn(2, 3, 4, 4, dtype=D)
        cost, _ = build_cost_volume(torch.stack([f, -f]), torch.ones(2, 2, 4, 4, dtype=torch.bool))
        assert torch.allclose(cost, f**2, atol=1e-15)

    def test_permutation(self):
        f = torch.randn(4, 2, 3, 4, 4, dtype=D)
        m = torch.rand(4, 2, 4, 4) > 0.3
        c1, fl1 = build_cost_volume(f, m)
        p = torch.tensor([2, 0, 3, 1])
        c2, fl2 = build_cost_volume(f[p], m[p])
        assert torch.allclose(c1, c2, atol=1e-14) and torch.equal(fl1, fl2)

    def test_flagged_pixels(self):
        f = torch.randn(2, 1, 1, 2, 2, dtype=D)
        m = torch.ones(2, 1, 2, 2, dtype=torch.bool)
        m[1, 0, 0, 0] = False
        cost, flagged = build_cost_volume(f, m)
        assert bool(flagged[0, 0, 0]) and int(flagged.sum()) == 1
        assert float(cost[0, 0, 0, 0]) == float(cost[0, 0][~flagged[0]].max())

    def test_single_view(self):
        with pytest.raises(ValueError):
            build_cost_volume(torch.zeros(1, 2, 1, 2, 2), torch.ones(1, 2, 2, 2, dtype=torch.bool))


class TestRegularize:
    @given(st.integers(0, 10_000), st.floats(0.0, 5.0))
    @settings(max_examples=20, deadline=None)
    def test_normalized(self, seed, scale):
        torch.manual_seed(seed)
        with torch.no_grad():
            _, P = regularize_volume(RegNet(2, 2), scale * torch.rand(6, 2, 4, 5))
        assert float((P.sum(0) - 1).abs().max()) < 1e-6

    def test_argmax_at_min_cost(self):
        torch.manual_seed(0)
        # relative cost is 0 at plane 5 and 8/7 elsewhere; after binomial smoothing
        # the margin to the next plane is gain * 8/7 * (1/2 - 1/4), 11.4 for gain 40
        cost = torch.full((8, 2, 5, 5), 3.0)
        cost[5] = 0.0
        net = RegNet(2, 2, gain=40.0)
        with torch.no_grad():
            S, P = regularize_volume(net, cost)
            logit = net.base_logit(cost.permute(1, 0, 2, 3)[None])[0, 0]
        top2 = logit.topk(2, dim=0).values
        assert float((top2[0] - top2[1]).min()) == pytest.approx(40 * 8 / 7 * 0.25, rel=1e-5)
        assert float((top2[0] - top2[1]).min()) >= 10
        assert bool((P.argmax(0) == 5).all())
        assert torch.isfinite(S).all() and S.shape == (2, 8, 5, 5)

    def test_doubling_changes_p(self):
        torch.manual_seed(1)
        net = RegNet(2, 2)
        cost = torch.rand(6, 2, 4, 4)
        with torch.no_grad():
            _, P1 = regularize_volume(net, cost)
            _, P2 = regularize_volume(net, 2 * cost)
        assert not torch.allclose(P1, P2)
        assert float((P2.sum(0) - 1).abs().max()) < 1e-6


class TestExpectation:
    def test_uniform(self):
        P = torch.full((8, 1, 1), 1 / 8, dtype=D)
        assert float(expect_depth(P, torch.linspace(1, 8, 8, dtype=D))) == pytest.approx(4.5, abs=1e-14)

    def test_one_hot(self):
        P = torch.zeros(4, 1, 1, dtype=D)
        P[2] = 1
        assert float(expect_depth(P, torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=D))) == 3.0

    def test_two_planes(self):
        P = torch.tensor([0.25, 0.75, 0, 0], dtype=D).view(4, 1, 1)
        assert float(expect_depth(P, torch.tensor([1.0, 2.0, 3.0, 4.0], dtype=D))) == pytest.approx(1.75, abs=1e-15)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_matches_loop_and_bounds(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(12))
        d = np.sort(rng.uniform(1, 5, 12))
        out = float(expect_depth(torch.as_tensor(p).view(12, 1, 1), torch.as_tensor(d)))
        assert abs(out - brute_expectation(p, d)) < 1e-12
        assert d[0] - 1e-12 <= out <= d[-1] + 1e-12


class TestUncertainty:
    depths = torch.linspace(1, 8, 8, dtype=D)

    def _U(self, P):
        P = P.view(8, 1, 1)
        return float(uncertainty_map(P, expect_depth(P, self.depths), self.depths))

    def test_one_hot_interior(self):
        for j in range(1, 7):
            P = torch.zeros(8, dtype=D)
            P[j] = 1
            assert self._U(P) == 0.0

    def test_uniform(self):
        assert self._U(torch.full((8,), 1 / 8, dtype=D)) == pytest.approx(0.5, abs=1e-15)

    def test_bimodal(self):
        P = torch.zeros(8, dtype=D)
        P[0] = P[7] = 0.5
        assert self._U(P) >= 0.5

    def test_mixture_monotone(self):
        one_hot = torch.zeros(8, dtype=D)
        one_hot[3] = 1
        uniform = torch.full((8,), 1 / 8, dtype=D)
        vals = [self._U(m * one_hot + (1 - m) * uniform) for m in (0.0, 0.25, 0.5, 0.75, 1.0)]
        assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))

    @given(st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_range(self, seed):
        g = torch.Generator().manual_seed(seed)
        P = torch.softmax(3 * torch.randn(8, 4, 4, generator=g, dtype=D), 0)
        d = torch.sort(torch.rand(8, 4, 4, generator=g, dtype=D) * 3 + 1, 0).values
        U = uncertainty_map(P, expect_depth(P, d), d)
        assert bool(((U >= 0) & (U <= 1)).all())


class TestCascade:
    def test_widths_shrink(self):
        g = DepthHypothesisGrid(1.0, 4.0)
        assert g.width(0) > g.width(1) > g.width(2)

    def test_hypotheses_inside_range(self):
        g = DepthHypothesisGrid(1.0, 4.0)
        prev = torch.tensor([[0.5, 1.2], [3.9, 2.5]])
        h = stage_hypotheses(g, 1, 4, 4, prev)
        assert float(h.min()) >= 1.0 - 1e-6 and float(h.max()) <= 4.0 + 1e-6
        assert torch.allclose(h[-1] - h[0], torch.full((4, 4), g.width(1)), atol=1e-5)

    def test_invalid_grid(self):
        with pytest.raises(ValueError):
            DepthHypothesisGrid(2.0, 1.0)
        with pytest.raises(ValueError):
            DepthHypothesisGrid(1.0, 2.0, (8, 1, 8))

    def test_random_inputs_shapes_and_range(self):
        torch.manual_seed(0)
        tgt = fronto_camera(w=16, h=16, f=16.0)
        srcs = [fronto_camera(0.1, 0, 16, 16, 16.0), fronto_camera(-0.1, 0.05, 16, 16, 16.0)]
        out = Cascade(z=8, planes=(8, 6, 4))(torch.rand(2, 16, 16, 3), srcs, tgt, 1.0, 3.0)
        assert [tuple(p.shape) for p in out.probs] == [(8, 4, 4), (6, 8, 8), (4, 16, 16)]
        assert [v.shape[0] for v in out.volumes] == [8, 4, 2]
        assert bool(((out.uncertainty >= 0) & (out.uncertainty <= 1)).all())
        for d, h in zip(out.depths, out.hypotheses):
            assert bool((d >= h[0] - 1e-5).all() & (d <= h[-1] + 1e-5).all())

    def test_planar_scene(self):
        d_star = 2.0
        tgt = fronto_camera()
        srcs = [fronto_camera(0.4, 0), fronto_camera(-0.4, 0), fronto_camera(0, 0.35), fronto_camera(0.3, -0.3)]
        model = Cascade(z=8)
        model.features = PooledColors(8)
        with torch.no_grad():
            for reg in model.regs:
                reg.log_gain.fill_(math.log(1e4))
            grid = DepthHypothesisGrid(1.0, 4.0)
            out = run_cascade(model, [plane_image(c, d_star) for c in srcs], srcs, tgt, grid)
        spacing = grid.width(2) / (grid.planes[2] - 1)
        # border pixels are seen by too few source views; compare the fully covered interior
        err = (out.depths[2] - d_star).abs()[6:-6, 6:-6]
        assert float(err.max()) <= spacing


class _Sparse:
    def __init__(self, u, v, depth, omega):
        self.u, self.v = np.asarray(u), np.asarray(v)
        self.depth, self.omega = np.asarray(depth, float), np.asarray(omega, float)


class TestConsistency:
    def _maps(self, value=2.0, w=16, h=12):
        return [torch.full((h // 4, w // 4), value, dtype=D), torch.full((h // 2, w // 2), value, dtype=D),
                torch.full((h, w), value, dtype=D)]

    def test_perfect_fit(self):
        sp = _Sparse([1, 5, 9], [0, 3, 11], [2.0, 2.0, 2.0], [0.1, 0.2, 0.0])
        assert float(consistency_loss(self._maps(), sp, 16, 12)) == 0.0

    def test_single_point_stage_two(self):
        maps = self._maps()
        maps[2] = maps[2] + 1.0
        sp = _Sparse([4], [7], [2.0], [0.3])
        loss = consistency_loss(maps, sp, 16, 12, (0.5, 1.0, 2.0))
        assert float(loss) == pytest.approx(0.7358, abs=1e-4)
        assert float(loss) == pytest.approx(2 * math.exp(-1), abs=1e-14)

    @given(st.floats(0.01, 100.0))
    @settings(max_examples=20)
    def test_omega_scale_invariance(self, c):
        rng = np.random.default_rng(0)
        maps = [torch.as_tensor(rng.uniform(1, 3, s), dtype=D) for s in ((3, 4), (6, 8), (12, 16))]
        sp = _Sparse(rng.integers(0, 16, 10), rng.integers(0, 12, 10), rng.uniform(1, 3, 10), rng.uniform(0, 1, 10))
        sp2 = _Sparse(sp.u, sp.v, sp.depth, sp.omega * c)
        assert float(consistency_loss(maps, sp, 16, 12)) == pytest.approx(float(consistency_loss(maps, sp2, 16, 12)),
                                                                        rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            consistency_loss(self._maps(), _Sparse([], [], [], []), 16, 12)

    def test_coarse_stage_sampled_bilinearly(self):
        # stage-0 map 3x4 for a 12x16 image: full-res pixel (u, v) samples at ((u+0.5)/4, (v+0.5)/4)
        coarse = torch.arange(12, dtype=D).reshape(3, 4)
        val = sweep.sample_depth_map(coarse, [5], [5], 16, 12)
        # (1.375, 1.375) in continuous coords -> pixel-center offsets 0.875 in x and y from node (0, 0)
        expect = coarse[0, 0] * 0.125 * 0.125 + coarse[0, 1] * 0.875 * 0.125 + coarse[1, 0] * 0.125 * 0.875 \
            + coarse[1, 1] * 0.875 * 0.875
        assert float(val) == pytest.approx(float(expect), abs=1e-12)

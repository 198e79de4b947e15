import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ucnerf.distill import (
    DegeneratePatchError,
    LossWeights,
    NonFiniteLossError,
    Patch,
    SmoothnessConfig,
    confidence_weights,
    grad_loss,
    partition_patches,
    rgb_loss,
    scale_loss,
    smooth_loss,
    solve_scale_shift,
    total_loss,
)

D = torch.float64
E1 = math.exp(-1.0)


def _ramp(size=6, slope=1.0, axis=1):
    x = torch.arange(size, dtype=D) * slope
    return x.expand(size, size).clone() if axis == 1 else x[:, None].expand(size, size).clone()


class TestRgb:
    def test_identity(self):
        x = torch.rand(4, 3, dtype=D)
        assert float(rgb_loss(x, x)) == 0.0

    def test_single_pixel(self):
        assert float(rgb_loss(torch.tensor([[0.1, 0.0, 0.0]], dtype=D), torch.zeros(1, 3, dtype=D))) == pytest.approx(0.01, abs=1e-15)

    def test_permutation_invariant(self):
        a, b = torch.rand(8, 3, dtype=D), torch.rand(8, 3, dtype=D)
        p = torch.randperm(8)
        assert float(rgb_loss(a, b)) == pytest.approx(float(rgb_loss(a[p], b[p])), abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rgb_loss(torch.zeros(2, 3), torch.zeros(3, 3))


class TestScale:
    def test_perfect_fit(self):
        d = torch.tensor([1.0, 2.0], dtype=D)
        assert float(scale_loss(d, d.numpy(), [0.1, 0.3])) == 0.0

    def test_zero_omega(self):
        assert float(scale_loss(torch.tensor([3.0], dtype=D), [1.0], [0.0])) == pytest.approx(2.0)

    def test_omega_equals_mean(self):
        assert float(scale_loss(torch.tensor([2.0], dtype=D), [1.0], [0.4])) == pytest.approx(0.36788, abs=1e-5)
        assert float(scale_loss(torch.tensor([2.0], dtype=D), [1.0], [0.4])) == pytest.approx(E1, abs=1e-15)

    def test_explicit_omega_bar(self):
        assert float(scale_loss(torch.tensor([2.0], dtype=D), [1.0], [0.4], omega_bar=0.8)) == pytest.approx(math.exp(-0.25))

    def test_empty(self):
        with pytest.raises(ValueError):
            scale_loss(torch.zeros(0, dtype=D), [], [])

    @given(st.lists(st.one_of(st.just(0.0), st.floats(1e-6, 5.0)), min_size=1, max_size=20), st.floats(0.01, 100.0))
    def test_weights_scale_invariant(self, omega, c):
        w1 = confidence_weights(torch.tensor(omega, dtype=D))
        w2 = confidence_weights(torch.tensor(omega, dtype=D) * c)
        np.testing.assert_allclose(w1.numpy(), w2.numpy(), rtol=1e-12, atol=1e-300)


class TestPartition:
    def test_zero_map_all_low(self):
        high, low = partition_patches(np.zeros((24, 32)), np.random.default_rng(0), 20)
        assert not high and len(low) == 20

    def test_step_function(self):
        U = np.zeros((24, 32))
        U[:, :16] = 1.0
        high, low = partition_patches(U, np.random.default_rng(1), 200)
        assert all(U[p.v0:p.v0 + 6, p.u0:p.u0 + 6].mean() > 0.5 for p in high)
        assert all(U[p.v0:p.v0 + 6, p.u0:p.u0 + 6].mean() <= 0.5 for p in low)
        # patches fully inside one half land on that half's side
        assert all(p.region == "high_uncertainty" for p in high + low if p.u0 + 6 <= 16)
        assert all(p.region == "low_uncertainty" for p in high + low if p.u0 >= 16)
        assert any(p.u0 + 6 <= 16 for p in high) and any(p.u0 >= 16 for p in low)

    def test_deterministic(self):
        U = np.random.default_rng(2).uniform(size=(24, 32))
        a = partition_patches(U, np.random.default_rng(5), 30)
        b = partition_patches(U, np.random.default_rng(5), 30)
        assert a == b

    def test_too_small(self):
        with pytest.raises(ValueError):
            partition_patches(np.zeros((6, 10)), np.random.default_rng(0))

    def test_patch_pixels(self):
        p = Patch(3, 5, "low_uncertainty", 2)
        np.testing.assert_array_equal(p.pixels(), [[3, 5], [4, 5], [3, 6], [4, 6]])


class TestScaleShift:
    def test_exact_affine(self):
        pred = torch.tensor([0.3, 1.2, 2.0, 5.5, 0.9], dtype=D)
        s, q = solve_scale_shift(pred, 2 * pred + 1)
        assert abs(float(s) - 2) < 1e-10 and abs(float(q) - 1) < 1e-10

    def test_identity(self):
        pred = torch.tensor([1.0, 2.0, 4.0], dtype=D)
        s, q = solve_scale_shift(pred, pred)
        assert float(s) == pytest.approx(1.0, abs=1e-12) and float(q) == pytest.approx(0.0, abs=1e-12)

    def test_worked_example(self):
        # frozen oracle: closed-form least squares, cross-checked by a residual scan below
        s, q = solve_scale_shift(torch.tensor([1.0, 2, 3, 4], dtype=D), torch.tensor([3.1, 4.9, 7.2, 8.8], dtype=D))
        assert abs(float(s) - 1.94) < 1e-6 and abs(float(q) - 1.15) < 1e-6

    def test_worked_example_brute_force(self):
        pred = np.array([1.0, 2, 3, 4])
        prior = np.array([3.1, 4.9, 7.2, 8.8])
        ss, qq = np.meshgrid(np.linspace(1.8, 2.1, 301), np.linspace(0.9, 1.4, 501), indexing="ij")
        res = ((prior - (ss[..., None] * pred + qq[..., None])) ** 2).sum(-1)
        i, j = np.unravel_index(res.argmin(), res.shape)
        assert ss[i, j] == pytest.approx(1.94, abs=1e-9) and qq[i, j] == pytest.approx(1.15, abs=1e-9)

    def test_degenerate(self):
        with pytest.raises(DegeneratePatchError):
            solve_scale_shift(torch.full((9,), 2.0, dtype=D), torch.rand(9, dtype=D))

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            solve_scale_shift(torch.rand(4, dtype=D), torch.rand(5, dtype=D))


class TestGradLoss:
    def test_affine_prior_zero(self):
        pred = torch.rand(3, 6, 6, dtype=D, generator=torch.Generator().manual_seed(0))
        loss, skipped = grad_loss(pred, 0.7 * pred - 0.3)
        assert float(loss) < 1e-12 and skipped == 0

    def test_x_ramp_residual(self):
        # residual after alignment: prior - fit = 0.1 * x; pred is a y-ramp so the x-ramp is orthogonal to it
        pred = _ramp(axis=0)
        x = _ramp(slope=0.1, axis=1)
        x = x - x.mean()
        loss, _ = grad_loss(pred[None], (pred + x)[None])
        assert float(loss) == pytest.approx(0.05, abs=1e-12)

    def test_degenerate_patch_skipped(self):
        pred = torch.stack([torch.full((6, 6), 2.0, dtype=D), _ramp()])
        loss, skipped = grad_loss(pred, torch.rand(2, 6, 6, dtype=D))
        assert skipped == 1 and torch.isfinite(loss)

    def test_all_degenerate(self):
        loss, skipped = grad_loss(torch.ones(2, 6, 6, dtype=D), torch.rand(2, 6, 6, dtype=D))
        assert float(loss) == 0.0 and skipped == 2

    @given(st.sampled_from([0.5, 2.0, 0.1, 7.0]), st.sampled_from([-1.0, 1.0, 0.0, 3.0]), st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_affine_invariance(self, a, b, seed):
        g = torch.Generator().manual_seed(seed)
        pred = 1 + torch.rand(4, 6, 6, dtype=D, generator=g)
        prior = torch.rand(4, 6, 6, dtype=D, generator=g)
        l1, _ = grad_loss(pred, prior)
        l2, _ = grad_loss(a * pred + b, prior)
        assert abs(float(l1) - float(l2)) < 1e-8


class TestSmoothLoss:
    def test_constant_pred(self):
        assert float(smooth_loss(torch.full((2, 6, 6), 3.0, dtype=D), torch.rand(2, 6, 6, dtype=D))) == 0.0

    def test_unit_gradient_flat_prior(self):
        # unit slope along both axes: each axis term is 1; the two are added
        pred = _ramp(axis=1) + _ramp(axis=0)
        assert float(smooth_loss(pred[None], torch.zeros(1, 6, 6, dtype=D))) == pytest.approx(2.0)
        assert float(smooth_loss(_ramp(axis=1)[None], torch.zeros(1, 6, 6, dtype=D))) == pytest.approx(1.0)

    def test_unit_gradient_unit_prior(self):
        loss = smooth_loss(_ramp(axis=1)[None], _ramp(axis=1)[None], SmoothnessConfig(1.0))
        assert float(loss) == pytest.approx(0.36788, abs=1e-5)
        assert float(loss) == pytest.approx(E1, abs=1e-15)

    def test_scale_normalizes_depths(self):
        pred, prior = 5 * _ramp(axis=1)[None], 5 * _ramp(axis=1)[None]
        assert float(smooth_loss(pred, prior, scale=5.0)) == pytest.approx(E1, abs=1e-15)

    def test_empty(self):
        assert float(smooth_loss(torch.zeros(0, 6, 6, dtype=D), torch.zeros(0, 6, 6, dtype=D))) == 0.0

    @given(st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_non_increasing_in_beta(self, seed):
        g = torch.Generator().manual_seed(seed)
        pred, prior = torch.rand(2, 6, 6, dtype=D, generator=g), torch.rand(2, 6, 6, dtype=D, generator=g) + 0.01
        vals = [float(smooth_loss(pred, prior, SmoothnessConfig(b))) for b in (0.1, 0.5, 1.0, 2.0, 8.0)]
        assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_invalid_beta(self):
        with pytest.raises(ValueError):
            SmoothnessConfig(0.0)


class TestTotal:
    def test_all_zero(self):
        assert float(total_loss({k: 0.0 for k in ("rgb", "con", "scale", "grad", "reg")})) == 0.0

    def test_all_one_paper_weights(self):
        comps = {k: torch.tensor(1.0, dtype=D) for k in ("rgb", "con", "scale", "grad", "reg")}
        assert float(total_loss(comps)) == pytest.approx(11.55, abs=1e-12)

    def test_gating(self):
        comps = {"rgb": torch.tensor(0.3), "con": torch.tensor(2.0), "grad": torch.tensor(1.0)}
        w = LossWeights(10, 0, 0, 0, 0)
        assert float(total_loss(comps, w)) == pytest.approx(3.0)

    @given(st.sampled_from(["rgb", "con", "scale", "grad", "reg"]), st.floats(-10, 10), st.floats(-10, 10))
    def test_linear_in_each_component(self, name, a, b):
        w = LossWeights()
        base = {k: torch.tensor(0.5, dtype=D) for k in ("rgb", "con", "scale", "grad", "reg")}
        la = float(total_loss({**base, name: torch.tensor(a, dtype=D)}, w))
        lb = float(total_loss({**base, name: torch.tensor(b, dtype=D)}, w))
        assert la - lb == pytest.approx(getattr(w, name) * (a - b), abs=1e-9)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite_names_component(self, bad):
        with pytest.raises(NonFiniteLossError) as ei:
            total_loss({"rgb": torch.tensor(1.0), "grad": torch.tensor(bad)})
        assert ei.value.component == "grad"

    def test_unknown_component(self):
        with pytest.raises(ValueError):
            total_loss({"depth": 1.0})

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(rgb=-1.0)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ucnerf.metrics import (
    DEPTH_KEYS,
    aggregate,
    depth_metrics,
    evaluate_depth,
    format_table,
    median_scale,
    psnr,
    ssim,
    to_gray,
)


class TestPsnr:
    def test_mse_1e2(self):
        a = np.zeros((4, 4, 3))
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-12)

    def test_identical(self):
        a = np.random.default_rng(0).uniform(size=(4, 4, 3))
        assert psnr(a, a) == float("inf")

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_decreasing_in_noise(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(16, 16, 3))
        n = rng.normal(size=a.shape)
        vals = [psnr(a, a + s * n) for s in (0.01, 0.05, 0.2)]
        assert vals[0] > vals[1] > vals[2]


class TestSsim:
    def test_identical(self):
        a = np.random.default_rng(0).uniform(size=(16, 20, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constants(self):
        assert ssim(np.full((12, 12), 0.3), np.full((12, 12), 0.3)) == pytest.approx(1.0)

    def test_negative_pattern(self):
        x = np.indices((16, 16)).sum(0) % 2 * 0.8 + 0.1
        assert ssim(x, 1 - x) < 1.0

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 20)), np.zeros((8, 20)))

    def test_gray_weights(self):
        np.testing.assert_allclose(to_gray(np.ones((1, 1, 3))), [[1.0]])

    def test_matches_skimage(self):
        skm = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(3)
        a = rng.uniform(size=(24, 32))
        b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
        ref = skm.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False)
        assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


class TestDepth:
    def test_median_scale_uniform(self):
        gt = np.random.default_rng(0).uniform(1, 3, (6, 6))
        scaled, f = median_scale(2 * gt, gt)
        assert f == 0.5
        np.testing.assert_allclose(scaled, gt, rtol=1e-15)

    def test_median_scale_identity(self):
        gt = np.linspace(1, 2, 9)
        assert median_scale(gt, gt)[1] == 1.0

    def test_median_robust_to_outlier(self):
        gt = np.linspace(1, 2, 9)
        pred = gt.copy()
        pred[-1] = 1000.0
        _, f = median_scale(pred, gt)
        assert f == pytest.approx(np.median(gt) / np.median(pred))
        assert f == pytest.approx(1.0)

    def test_median_zero(self):
        with pytest.raises(ValueError):
            median_scale(np.zeros(3), np.ones(3))

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            median_scale(np.ones(3), np.ones(3), np.zeros(3, bool))

    def test_identity_metrics(self):
        gt = np.linspace(1, 2, 9)
        m = depth_metrics(gt, gt)
        assert (m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta_125) == (0, 0, 0, 0, 1.0)

    def test_threshold_boundary(self):
        gt = np.linspace(1, 2, 9)
        assert depth_metrics(1.25001 * gt, gt).delta_125 == 0.0

    def test_hand_values(self):
        m = depth_metrics(np.array([3.0]), np.array([2.0]))
        assert m.abs_rel == pytest.approx(0.5)
        assert m.sq_rel == pytest.approx(0.5)
        assert m.rmse == pytest.approx(1.0)
        assert m.rmse_log == pytest.approx(0.4055, abs=1e-4)
        assert m.rmse_log == pytest.approx(math.log(1.5))
        assert m.delta_125 == 0.0

    def test_non_positive(self):
        with pytest.raises(ValueError):
            depth_metrics(np.array([0.0, 1.0]), np.array([1.0, 1.0]))

    @given(st.floats(0.01, 100.0), st.integers(0, 1000))
    @settings(max_examples=30)
    def test_scale_then_metric_zero(self, c, seed):
        gt = np.random.default_rng(seed).uniform(1, 3, 25)
        m = evaluate_depth(c * gt, gt)
        assert m.rmse < 1e-12 and m.delta_125 == 1.0

    @given(st.integers(0, 1000))
    @settings(max_examples=30)
    def test_median_matches_after_scaling(self, seed):
        rng = np.random.default_rng(seed)
        gt, pred = rng.uniform(1, 3, 31), rng.uniform(0.5, 5, 31)
        scaled, _ = median_scale(pred, gt)
        assert np.median(scaled) == pytest.approx(np.median(gt), rel=1e-14)


class TestAggregate:
    def test_hand_recompute(self):
        rows = [{"view": 0, "rmse": 1.0}, {"view": 1, "rmse": 3.0}]
        s = aggregate(rows, ["rmse"])
        assert s["rmse"] == {"mean": 2.0, "std": 1.0}
        table = format_table(rows, s, ["rmse"])
        assert "mean" in table and "2.0000" in table and len(table.splitlines()) == 5

    def test_keys(self):
        assert DEPTH_KEYS == ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta_125")

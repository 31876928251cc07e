"""Flow model tests, including the reduced-loss identity against the
direct negative log-likelihood oracle and a quadrature check of the
density normalization."""

import numpy as np
import pytest

from aspan import flow as F
from aspan import tensor as T
from aspan.backbone import FeatureMap
from aspan.flow import FlowHeadWeights, FlowMap
from aspan.tensor import Tensor


def make_features(rng, h=4, w=4, d=16, extent=(32, 32)):
    return FeatureMap(Tensor(rng.standard_normal((h, w, d))), 8.0, extent)


def make_head(rng, d=16):
    return F.init_flow_head(rng, d)


class TestRegressFlow:
    def test_zero_raw_gives_center_and_unit_sigma(self):
        feats = FeatureMap(Tensor(np.zeros((2, 2, 8))), 8.0, (16, 24))
        head = FlowHeadWeights(Tensor(np.zeros((8, 4))), Tensor(np.zeros(4)),
                               Tensor(np.eye(4)), Tensor(np.zeros(4)))
        out = F.regress_flow(feats, head)
        np.testing.assert_allclose(out.values[..., 0], 12.0)  # W/2
        np.testing.assert_allclose(out.values[..., 1], 8.0)   # H/2
        np.testing.assert_allclose(out.values[..., 2:], 1.0)

    def test_log_sigma_inverse(self):
        feats = FeatureMap(Tensor(np.zeros((1, 1, 4))), 8.0, (8, 8))
        w2 = np.zeros((4, 4))
        b2 = np.array([0.0, 0.0, np.log(2.0), np.log(3.0)])
        head = FlowHeadWeights(Tensor(np.eye(4)), Tensor(np.zeros(4)),
                               Tensor(w2), Tensor(b2))
        out = F.regress_flow(feats, head)
        np.testing.assert_allclose(out.values[0, 0, 2:], [2.0, 3.0])

    def test_ranges_hold_for_random_weights(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            r = np.random.default_rng(seed)
            feats = make_features(r, extent=(40, 56))
            out = F.regress_flow(feats, make_head(r))
            assert out.values[..., 0].min() >= 0 and out.values[..., 0].max() <= 56
            assert out.values[..., 1].min() >= 0 and out.values[..., 1].max() <= 40
            assert out.values[..., 2:].min() > 0
        del rng


class TestGaussianProb:
    def test_peak_value(self):
        p = F.gaussian_prob((3.0, 4.0, 2.0, 0.5), 3.0, 4.0)
        np.testing.assert_allclose(p, 1.0 / (2 * np.pi * 2.0 * 0.5))

    def test_one_sigma_off_axis(self):
        peak = F.gaussian_prob((0.0, 0.0, 2.0, 3.0), 0.0, 0.0)
        p = F.gaussian_prob((0.0, 0.0, 2.0, 3.0), 2.0, 0.0)
        np.testing.assert_allclose(p, peak * np.exp(-0.5))

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(F.DomainError):
            F.gaussian_prob((0.0, 0.0, 0.0, 1.0), 0.0, 0.0)

    def test_integrates_to_one(self):
        """Quadrature over +-6 sigma must recover unit mass within 1e-3."""
        rng = np.random.default_rng(1)
        for _ in range(10):
            ux, uy = rng.uniform(-5, 5, 2)
            sx, sy = rng.uniform(0.3, 4.0, 2)
            xs = np.linspace(ux - 6 * sx, ux + 6 * sx, 301)
            ys = np.linspace(uy - 6 * sy, uy + 6 * sy, 301)
            grid = np.array([[F.gaussian_prob((ux, uy, sx, sy), x, y) for x in xs]
                             for y in ys])
            mass = np.trapezoid(np.trapezoid(grid, xs, axis=1), ys)
            assert abs(mass - 1.0) < 1e-3


class TestPoolFlow:
    def test_constant_map(self):
        grid = np.broadcast_to([4.0, 5.0, 1.0, 2.0], (4, 4, 4)).copy()
        pooled = F.pool_flow(FlowMap(Tensor(grid), 8.0, (32, 32)))
        assert pooled.grid.shape == (2, 2, 4)
        assert pooled.stride == 16.0
        np.testing.assert_allclose(pooled.values, grid[:2, :2])

    def test_mean_of_quad(self):
        grid = np.zeros((2, 2, 4))
        grid[..., 0] = [[10, 20], [30, 40]]
        grid[..., 2:] = 1.0
        pooled = F.pool_flow(FlowMap(Tensor(grid), 8.0, (16, 16)))
        np.testing.assert_allclose(pooled.values[0, 0, 0], 25.0)

    def test_pooled_sigma_positive(self):
        rng = np.random.default_rng(2)
        grid = np.abs(rng.standard_normal((4, 6, 4))) + 1e-3
        pooled = F.pool_flow(FlowMap(Tensor(grid), 8.0, (32, 48)))
        assert pooled.values[..., 2:].min() > 0


def reference_nll(values, gt, mask):
    """Independent oracle: -mean log Gaussian density over masked cells."""
    total, count = 0.0, 0
    h, w = mask.shape
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            total += -np.log(F.gaussian_prob(values[r, c], gt[r, c, 0], gt[r, c, 1]))
            count += 1
    return total / count


class TestFlowLoss:
    def _random_instance(self, rng, h=3, w=4):
        grid = np.empty((h, w, 4))
        grid[..., 0:2] = rng.uniform(0, 32, (h, w, 2))
        grid[..., 2:4] = rng.uniform(0.2, 5.0, (h, w, 2))
        # residuals bounded in sigma units keep the oracle density representable
        gt = grid[..., 0:2] + rng.uniform(-3, 3, (h, w, 2)) * grid[..., 2:4]
        mask = rng.random((h, w)) > 0.3
        mask[0, 0] = True
        return FlowMap(Tensor(grid), 8.0, (32, 32)), gt, mask

    def test_exact_prediction_unit_sigma_is_zero(self):
        gt = np.random.default_rng(3).uniform(0, 32, (2, 2, 2))
        grid = np.concatenate([gt, np.ones((2, 2, 2))], axis=-1)
        fm = FlowMap(Tensor(grid), 8.0, (32, 32))
        mask = np.ones((2, 2), bool)
        loss = F.flow_loss([(fm, fm)], (gt, gt), (mask, mask))
        np.testing.assert_allclose(loss.item(), 0.0, atol=1e-12)

    def test_exact_prediction_sigma_e_is_two(self):
        gt = np.random.default_rng(4).uniform(0, 32, (2, 3, 2))
        grid = np.concatenate([gt, np.full((2, 3, 2), np.e)], axis=-1)
        fm = FlowMap(Tensor(grid), 8.0, (32, 32))
        mask = np.ones((2, 3), bool)
        loss = F.flow_loss([(fm, fm)], (gt, gt), (mask, mask))
        np.testing.assert_allclose(loss.item(), 2.0, atol=1e-12)

    def test_reduced_form_matches_nll_oracle(self):
        """Reduced loss == -mean log density - log 2 pi on random instances."""
        rng = np.random.default_rng(5)
        for _ in range(20):
            fm, gt, mask = self._random_instance(rng)
            loss = F.flow_loss([(fm, fm)], (gt, gt), (mask, mask)).item()
            oracle = reference_nll(fm.values, gt, mask) - np.log(2 * np.pi)
            np.testing.assert_allclose(loss, oracle, atol=1e-9)

    def test_minimized_at_sigma_equal_residual(self):
        """1-D scan: per-cell loss in sigma is minimized at sigma = |r|."""
        residual = 2.7
        sigmas = np.linspace(0.5, 6.0, 400)
        losses = np.log(sigmas) + 0.5 * residual ** 2 / sigmas ** 2
        best = sigmas[np.argmin(losses)]
        assert abs(best - residual) < 0.02

    def test_empty_mask_contributes_zero(self):
        rng = np.random.default_rng(6)
        fm, gt, _ = self._random_instance(rng)
        empty = np.zeros(fm.values.shape[:2], bool)
        loss = F.flow_loss([(fm, fm)], (gt, gt), (empty, empty))
        assert loss.item() == 0.0

    def test_gradient_through_regression(self):
        """End-to-end flow-loss gradient w.r.t. features and head weights."""
        rng = np.random.default_rng(7)
        feats = make_features(rng, h=2, w=2, d=8)
        head = F.init_flow_head(rng, 8)
        gt = rng.uniform(0, 32, (2, 2, 2))
        mask = np.ones((2, 2), bool)

        def loss_fn(grid, w1, b1, w2, b2):
            fm = F.regress_flow(
                FeatureMap(grid, 8.0, (32, 32)),
                FlowHeadWeights(w1, b1, w2, b2))
            return F.flow_loss([(fm, fm)], (gt, gt), (mask, mask))

        params = [feats.grid, head.w1, head.b1, head.w2, head.b2]
        assert T.grad_check(loss_fn, params) < 1e-5

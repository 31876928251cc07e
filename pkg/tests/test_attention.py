"""Attention kernel tests: brute-force oracles for the global path,
span geometry properties, the local/global equivalence check and the
constant per-query cost of the sampled local kernel."""

import numpy as np

from aspan import attention as A
from aspan import tensor as T
from aspan.backbone import FeatureMap
from aspan.flow import FlowMap
from aspan.tensor import Tensor


def feature_map(rng, h, w, d=8, stride=8.0):
    extent = (int(h * stride), int(w * stride))
    return FeatureMap(Tensor(rng.standard_normal((h, w, d))), stride, extent)


def identity_proj(d):
    eye = Tensor(np.eye(d))
    return A.ProjWeights(eye, eye, eye)


def brute_force_attention(src, tgt, wq, wk, wv, tau, dim):
    """Per-query softmax-weighted sum, written as explicit loops."""
    q = src.reshape(-1, dim) @ wq
    k = tgt.reshape(-1, dim) @ wk
    v = tgt.reshape(-1, dim) @ wv
    out = np.zeros_like(q)
    for i in range(q.shape[0]):
        logits = np.array([tau * q[i] @ k[j] / np.sqrt(dim) for j in range(k.shape[0])])
        weights = np.exp(logits - logits.max())
        weights /= weights.sum()
        out[i] = weights @ v
    return out.reshape(src.shape[0], src.shape[1], dim)


class TestGlobalAttention:
    def test_identical_keys_give_mean_value(self):
        rng = np.random.default_rng(0)
        d = 6
        src = feature_map(rng, 2, 2, d)
        tgt_grid = np.tile(rng.standard_normal((1, 1, d)), (3, 3, 1))
        tgt_vals = rng.standard_normal((3, 3, d))
        # identical K rows but varying V: project K from constant grid
        wk = Tensor(np.eye(d))
        proj = A.ProjWeights(Tensor(np.eye(d)), wk, Tensor(np.eye(d)))
        tgt = FeatureMap(Tensor(tgt_grid), 8.0, (24, 24))
        out = A.global_attention(src, tgt, proj)
        np.testing.assert_allclose(
            out.data, np.broadcast_to(tgt_grid.reshape(-1, d).mean(0), out.shape),
            atol=1e-12)
        del tgt_vals

    def test_single_target_token(self):
        rng = np.random.default_rng(1)
        d = 4
        src = feature_map(rng, 2, 3, d)
        tgt = feature_map(rng, 1, 1, d)
        out = A.global_attention(src, tgt, identity_proj(d))
        expected = np.broadcast_to(tgt.grid.data[0, 0], (2, 3, d))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(2)
        d = 8
        src = feature_map(rng, 6, 6, d)
        tgt = feature_map(rng, 6, 6, d)
        proj = A.init_proj(rng, d)
        tau = 1.3
        out = A.global_attention(src, tgt, proj, Tensor(tau))
        expected = brute_force_attention(src.grid.data, tgt.grid.data,
                                         proj.wq.data, proj.wk.data, proj.wv.data,
                                         tau, d)
        np.testing.assert_allclose(out.data, expected, atol=1e-10)


def uniform_flow(h, w, u=(16.0, 16.0), sigma=(2.0, 3.0), stride=8.0, extent=(64, 64)):
    grid = np.zeros((h, w, 4))
    grid[..., 0], grid[..., 1] = u
    grid[..., 2], grid[..., 3] = sigma
    return FlowMap(Tensor(grid), stride, extent)


class TestComputeSpan:
    def test_rectangle_arithmetic(self):
        # mean u = (32, 32) px, sigma = (2, 3) px, n = 5 on a stride-1 grid:
        # x half-extent 10, y half-extent 15 around center 32
        flow = uniform_flow(4, 4, u=(32.0, 32.0), sigma=(2.0, 3.0),
                            stride=1.0, extent=(64, 64))
        span = A.compute_span(flow, 4, 5.0, (64, 64), 1.0, 8)
        cell = span.cells[0]
        assert cell.half_extents == (10.0, 15.0)
        xs = cell.coords[0, :, 1]
        ys = cell.coords[:, 0, 0]
        np.testing.assert_allclose([xs[0], xs[-1]], [22.0, 42.0])
        np.testing.assert_allclose([ys[0], ys[-1]], [17.0, 47.0])

    def test_tiny_sigma_clamps_to_minimum(self):
        flow = uniform_flow(4, 4, sigma=(1e-9, 1e-9))
        span = A.compute_span(flow, 2, 5.0, (8, 8), 8.0, 8)
        for cell in span.cells:
            assert cell.half_extents == (3.5, 3.5)

    def test_huge_sigma_covers_full_grid(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            grid = np.zeros((6, 6, 4))
            grid[..., 0:2] = rng.uniform(0, 48, (6, 6, 2))
            grid[..., 2:4] = rng.uniform(500, 1000, (6, 6, 2))
            flow = FlowMap(Tensor(grid), 8.0, (48, 48))
            span = A.compute_span(flow, 3, 5.0, (6, 6), 8.0, 6)
            for cell in span.cells:
                ys = cell.coords[:, 0, 0]
                xs = cell.coords[0, :, 1]
                np.testing.assert_allclose(ys, np.arange(6))
                np.testing.assert_allclose(xs, np.arange(6))

    def test_all_samples_inside_grid(self):
        rng = np.random.default_rng(4)
        for seed in range(10):
            r = np.random.default_rng(seed)
            grid = np.empty((8, 8, 4))
            grid[..., 0:2] = r.uniform(-40, 100, (8, 8, 2))  # centers may be outside
            grid[..., 2:4] = r.uniform(0.01, 60, (8, 8, 2))
            flow = FlowMap(Tensor(grid), 8.0, (64, 64))
            span = A.compute_span(flow, 4, 5.0, (8, 8), 8.0, 8)
            for cell in span.cells:
                assert cell.coords[..., 0].min() >= 0.0
                assert cell.coords[..., 0].max() <= 7.0
                assert cell.coords[..., 1].min() >= 0.0
                assert cell.coords[..., 1].max() <= 7.0
        del rng

    def test_fixed_half_extent_override(self):
        flow = uniform_flow(4, 4, sigma=(50.0, 50.0))
        span = A.compute_span(flow, 2, 5.0, (32, 32), 8.0, 4, fixed_half_px=13.0)
        for cell in span.cells:
            np.testing.assert_allclose(cell.half_extents, (13.0 / 8.0, 13.0 / 8.0))


class TestLocalCrossAttention:
    def test_equals_global_on_full_lattice_span(self):
        """With spans forced to the full grid and g matching the grid side,
        samples land exactly on the lattice and the local kernel must
        reproduce full attention."""
        rng = np.random.default_rng(5)
        d = 8
        src = feature_map(rng, 6, 6, d)
        tgt = feature_map(rng, 6, 6, d)
        proj = A.init_proj(rng, d)
        flow = uniform_flow(6, 6, u=(24.0, 24.0), sigma=(1e5, 1e5),
                            stride=8.0, extent=(48, 48))
        tau = Tensor(0.8)
        local = A.local_cross_attention(src, tgt, flow, 3, 5.0, 6, tau, proj)
        full = A.global_attention(src, tgt, proj, tau)
        np.testing.assert_allclose(local.data, full.data, atol=1e-8)

    def test_constant_values_give_constant_message(self):
        rng = np.random.default_rng(6)
        d = 4
        src = feature_map(rng, 4, 4, d)
        tgt = FeatureMap(Tensor(np.tile(rng.standard_normal((1, 1, d)), (4, 4, 1))),
                         8.0, (32, 32))
        flow = uniform_flow(4, 4, u=(16.0, 16.0), sigma=(3.0, 3.0), extent=(32, 32))
        out = A.local_cross_attention(src, tgt, flow, 2, 5.0, 4, 1.0, identity_proj(d))
        np.testing.assert_allclose(out.data, np.broadcast_to(tgt.grid.data[0, 0],
                                                             out.shape), atol=1e-10)

    def test_per_query_cost_constant_in_target_size(self):
        """Interaction madds per query stay at 2 g^2 d regardless of the
        target grid size."""
        rng = np.random.default_rng(7)
        d, g = 8, 4
        per_query = []
        for side in (8, 16, 32):
            src = feature_map(rng, 8, 8, d)
            tgt = feature_map(rng, side, side, d)
            flow = uniform_flow(8, 8, u=(side * 4.0, side * 4.0), sigma=(9.0, 9.0),
                                stride=8.0, extent=(side * 8, side * 8))
            with A.count_madds() as counter:
                A.local_cross_attention(src, tgt, flow, 4, 5.0, g, 1.0,
                                        A.init_proj(rng, d))
            interact = counter.counts["local.scores"] + counter.counts["local.aggregate"]
            per_query.append(interact / 64)
        assert per_query[0] == per_query[1] == per_query[2] == 2 * g * g * d

    def test_attention_rows_sum_to_one_through_values(self):
        """All-equal V rows must return exactly that value (weights sum to 1)."""
        rng = np.random.default_rng(8)
        d = 4
        src = feature_map(rng, 4, 4, d)
        tgt = FeatureMap(Tensor(np.ones((5, 5, d))), 8.0, (40, 40))
        flow = uniform_flow(4, 4, u=(20.0, 20.0), sigma=(2.0, 2.0), extent=(40, 40))
        out = A.local_cross_attention(src, tgt, flow, 2, 5.0, 3, 2.0, identity_proj(d))
        np.testing.assert_allclose(out.data, np.ones(out.shape), atol=1e-10)

    def test_gradients_flow_through_sampling_and_softmax(self):
        rng = np.random.default_rng(9)
        d = 4
        src = feature_map(rng, 2, 2, d)
        tgt = feature_map(rng, 3, 3, d)
        proj = A.init_proj(rng, d)
        flow = uniform_flow(2, 2, u=(12.0, 12.0), sigma=(4.0, 4.0),
                            stride=8.0, extent=(16, 16))

        def f(src_grid, tgt_grid, wq, wk, wv):
            s = FeatureMap(src_grid, 8.0, (16, 16))
            t = FeatureMap(tgt_grid, 8.0, (24, 24))
            p = A.ProjWeights(wq, wk, wv)
            return (A.local_cross_attention(s, t, flow, 2, 5.0, 3, 1.0, p) ** 2.0).sum()

        params = [src.grid, tgt.grid, proj.wq, proj.wk, proj.wv]
        assert T.grad_check(f, params) < 1e-5

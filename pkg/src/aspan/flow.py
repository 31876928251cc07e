"""Probabilistic flow maps: regression head, Gaussian density, pooling
and the reduced log-likelihood training loss.

A flow cell stores (u_x, u_y, sigma_x, sigma_y) in full image pixels:
u is the estimated corresponding coordinate in the other image, sigma
the per-axis standard deviation of that estimate. The ranges are
enforced by construction (sigmoid for u, exp for sigma).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeatureMap
from .tensor import Tensor

log = logging.getLogger(__name__)


class DomainError(ValueError):
    """A flow parameter is outside its valid domain."""


@dataclass
class FlowMap:
    grid: Tensor                     # H x W x 4: (u_x, u_y, sigma_x, sigma_y)
    stride: float
    image_extent: tuple[int, int]

    @property
    def values(self) -> np.ndarray:
        return self.grid.data


@dataclass
class FlowHeadWeights:
    """MLP of shape (D, 64, 4) applied per cell."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def layers(self):
        return [(self.w1, self.b1), (self.w2, self.b2)]


SIGMA_BIAS_INIT = np.log(8.0)


def init_flow_head(rng: np.random.Generator, dim: int, hidden: int = 64) -> FlowHeadWeights:
    from .backbone import glorot_uniform
    w1 = glorot_uniform(rng, (dim, hidden), dim, hidden)
    w2 = glorot_uniform(rng, (hidden, 4), hidden, 4)
    # start uncertain: wide sigma keeps the initial likelihood term tame and
    # the first attention spans broad
    b2 = np.array([0.0, 0.0, SIGMA_BIAS_INIT, SIGMA_BIAS_INIT])
    return FlowHeadWeights(
        Tensor(w1, requires_grad=True), Tensor(np.zeros(hidden), requires_grad=True),
        Tensor(w2, requires_grad=True), Tensor(b2, requires_grad=True))


def regress_flow(features: FeatureMap, weights: FlowHeadWeights) -> FlowMap:
    """Per-cell 4-vector f -> u = sigmoid(f[:2]) * (W_img, H_img), sigma = exp(f[2:])."""
    h, w, d = features.grid.shape
    img_h, img_w = features.image_extent
    raw = T.mlp_forward(T.reshape(features.grid, (h * w, d)), weights.layers)
    u = T.sigmoid(raw[:, 0:2]) * np.array([float(img_w), float(img_h)])
    sigma = T.exp(raw[:, 2:4])
    grid = T.reshape(T.concat([u, sigma], axis=1), (h, w, 4))
    return FlowMap(grid=grid, stride=features.stride, image_extent=features.image_extent)


def gaussian_prob(phi_cell, x: float, y: float) -> float:
    """Axis-aligned 2-D Gaussian density of a flow cell at point (x, y)."""
    u_x, u_y, s_x, s_y = (float(v) for v in phi_cell)
    if s_x <= 0.0 or s_y <= 0.0:
        raise DomainError(f"standard deviations must be positive, got ({s_x}, {s_y})")
    quad = (x - u_x) ** 2 / (2.0 * s_x ** 2) + (y - u_y) ** 2 / (2.0 * s_y ** 2)
    return float(np.exp(-quad) / (2.0 * np.pi * s_x * s_y))


def pool_flow(flow: FlowMap, stride_factor: int = 2) -> FlowMap:
    """Channelwise strided average pooling of the four flow parameters."""
    pooled = T.avg_pool(flow.grid, stride_factor)
    return FlowMap(grid=pooled, stride=flow.stride * stride_factor,
                   image_extent=flow.image_extent)


def flow_loss(flows_per_block, gt_pair, mask_pair) -> Tensor:
    """Reduced negative log-likelihood over all blocks and both directions.

    With w = log sigma the per-cell term is
        w_x + w_y + 0.5 e^{-2 w_x} (x - u_x)^2 + 0.5 e^{-2 w_y} (y - u_y)^2,
    which equals the negative log Gaussian density minus the constant
    log 2 pi. Supervision is restricted to cells whose visibility mask is
    true; contributions are averaged over the 2N (block, direction) terms.
    """
    contributions = []
    for flow_a, flow_b in flows_per_block:
        for flow, gt, mask in ((flow_a, gt_pair[0], mask_pair[0]),
                               (flow_b, gt_pair[1], mask_pair[1])):
            contributions.append(_masked_flow_nll(flow, gt, mask))
    if not contributions:
        return Tensor(0.0)
    total = contributions[0]
    for c in contributions[1:]:
        total = total + c
    return total * (1.0 / len(contributions))


def _masked_flow_nll(flow: FlowMap, gt: np.ndarray, mask: np.ndarray) -> Tensor:
    if not mask.any():
        log.warning("flow supervision mask is empty; contributing 0")
        return Tensor(0.0)
    cells = flow.grid[mask]          # K x 4
    target = gt[mask]                # K x 2, (x, y) pixels
    u = cells[:, 0:2]
    w = T.log(cells[:, 2:4])
    sq = (Tensor(target) - u) ** 2.0
    per_cell = w.sum(axis=1) + 0.5 * (T.exp(-2.0 * w) * sq).sum(axis=1)
    return per_cell.mean()

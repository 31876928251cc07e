"""Initialization block and iterated global-local attention blocks.

Each block regresses per-direction flow from its input features, builds a
three-level pyramid (fine stride 8, medium stride 16, coarse at a fixed
extent so global attention cost is input-size independent), retrieves
messages at every level, fuses them and applies a residual conv FFN.
The two directions share weights within a block and update in parallel
from the same inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import (ProjWeights, TemperatureSet, global_attention,
                        init_proj, init_temperatures, local_cross_attention,
                        proj_parameters)
from .backbone import FeatureMap, glorot_uniform
from .config import GlaConfig
from .flow import FlowHeadWeights, FlowMap, init_flow_head, pool_flow, regress_flow
from .tensor import Tensor


@dataclass
class FfnWeights:
    """Residual update F + LN(Conv3(F || M)); `kernel` is a 3x3 conv stencil
    or a dense matrix for the 1x1 ablation variant."""
    kind: str                # "conv3" or "linear"
    kernel: Tensor           # 3 x 3 x 2D x D, or 2D x D when linear
    bias: Tensor
    ln_gain: Tensor
    ln_bias: Tensor


def init_ffn(rng: np.random.Generator, dim_in: int, dim_out: int,
             kind: str = "conv3") -> FfnWeights:
    if kind == "conv3":
        kernel = Tensor(glorot_uniform(rng, (3, 3, dim_in, dim_out),
                                       9 * dim_in, 9 * dim_out), requires_grad=True)
    else:
        kernel = Tensor(glorot_uniform(rng, (dim_in, dim_out), dim_in, dim_out),
                        requires_grad=True)
    return FfnWeights(kind, kernel,
                      Tensor(np.zeros(dim_out), requires_grad=True),
                      Tensor(np.ones(dim_out), requires_grad=True),
                      Tensor(np.zeros(dim_out), requires_grad=True))


def ffn(features: Tensor, message: Tensor, w: FfnWeights) -> Tensor:
    """Residual feed-forward update on an H x W x D map."""
    stacked = T.concat([features, message], axis=2)
    if w.kind == "conv3":
        mixed = T.conv3x3(stacked, w.kernel, w.bias)
    else:
        h, width, d2 = stacked.shape
        flat = T.matmul(T.reshape(stacked, (h * width, d2)), w.kernel) + w.bias
        mixed = T.reshape(flat, (h, width, w.kernel.shape[1]))
    return features + T.layer_norm(mixed, w.ln_gain, w.ln_bias)


@dataclass
class FusionWeights:
    """Two-layer MLP collapsing concatenated level messages back to D."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def layers(self):
        return [(self.w1, self.b1), (self.w2, self.b2)]


def init_fusion(rng: np.random.Generator, n_messages: int, dim: int) -> FusionWeights:
    d_in = n_messages * dim
    return FusionWeights(
        Tensor(glorot_uniform(rng, (d_in, dim), d_in, dim), requires_grad=True),
        Tensor(np.zeros(dim), requires_grad=True),
        Tensor(glorot_uniform(rng, (dim, dim), dim, dim), requires_grad=True),
        Tensor(np.zeros(dim), requires_grad=True))


def fuse_messages(coarse_msg: Tensor, medium_msg: Tensor | None,
                  fine_msg: Tensor | None, fusion: FusionWeights) -> Tensor:
    """Concatenate level messages (coarse || medium || fine) and mix to D.

    Messages must already share the fine-level extent. The medium/fine
    slots are absent in single-level mode.
    """
    parts = [m for m in (coarse_msg, medium_msg, fine_msg) if m is not None]
    stacked = parts[0] if len(parts) == 1 else T.concat(parts, axis=2)
    h, w, d_in = stacked.shape
    if d_in != fusion.w1.shape[0]:
        raise T.DimensionError(
            f"fusion expects {fusion.w1.shape[0]} channels, got {d_in}")
    out = T.mlp_forward(T.reshape(stacked, (h * w, d_in)), fusion.layers)
    return T.reshape(out, (h, w, fusion.w2.shape[1]))


def build_pyramid(features: FeatureMap, coarse_h: int,
                  coarse_w: int) -> tuple[FeatureMap, FeatureMap, FeatureMap]:
    """(coarse fixed extent, medium stride 16, fine stride 8)."""
    medium_grid = T.avg_pool(features.grid, 2)
    medium = FeatureMap(medium_grid, features.stride * 2, features.image_extent)
    coarse_grid = T.resize_bilinear(medium_grid, coarse_h, coarse_w)
    coarse_stride = features.image_extent[0] / coarse_h
    coarse = FeatureMap(coarse_grid, coarse_stride, features.image_extent)
    return coarse, medium, features


@dataclass
class InitRound:
    proj: ProjWeights
    ffn: FfnWeights


@dataclass
class InitWeights:
    rounds: list


def init_init_weights(rng: np.random.Generator, dim: int,
                      ffn_kernel: str = "conv3") -> InitWeights:
    return InitWeights(rounds=[
        InitRound(init_proj(rng, dim), init_ffn(rng, 2 * dim, dim, ffn_kernel))
        for _ in range(2)])


def init_block(feat_a: FeatureMap, feat_b: FeatureMap, weights: InitWeights,
               coarse_extent: tuple[int, int]) -> tuple[FeatureMap, FeatureMap]:
    """Two symmetric global cross-attention rounds at the fixed coarse
    extent; the residual is upsampled back to stride 8 and added."""
    h0, w0 = coarse_extent
    base_a = T.resize_bilinear(feat_a.grid, h0, w0)
    base_b = T.resize_bilinear(feat_b.grid, h0, w0)
    stride_a = feat_a.image_extent[0] / h0
    cur_a, cur_b = base_a, base_b
    for rnd in weights.rounds:
        map_a = FeatureMap(cur_a, stride_a, feat_a.image_extent)
        map_b = FeatureMap(cur_b, stride_a, feat_b.image_extent)
        msg_a = global_attention(map_a, map_b, rnd.proj)
        msg_b = global_attention(map_b, map_a, rnd.proj)
        cur_a = ffn(cur_a, msg_a, rnd.ffn)
        cur_b = ffn(cur_b, msg_b, rnd.ffn)
    out_a = feat_a.grid + T.resize_bilinear(cur_a - base_a, feat_a.height, feat_a.width)
    out_b = feat_b.grid + T.resize_bilinear(cur_b - base_b, feat_b.height, feat_b.width)
    return (FeatureMap(out_a, feat_a.stride, feat_a.image_extent),
            FeatureMap(out_b, feat_b.stride, feat_b.image_extent))


@dataclass
class BlockWeights:
    proj_coarse: ProjWeights
    proj_medium: ProjWeights | None
    proj_fine: ProjWeights | None
    fusion: FusionWeights
    ffn: FfnWeights
    flow_head: FlowHeadWeights | None
    temps: TemperatureSet


def init_block_weights(rng: np.random.Generator, dim: int,
                       config: GlaConfig) -> BlockWeights:
    multi = config.attention_mode != "single_level"
    return BlockWeights(
        proj_coarse=init_proj(rng, dim),
        proj_medium=init_proj(rng, dim) if multi else None,
        proj_fine=init_proj(rng, dim) if multi else None,
        fusion=init_fusion(rng, 3 if multi else 1, dim),
        ffn=init_ffn(rng, 2 * dim, dim, config.ffn_kernel),
        flow_head=init_flow_head(rng, dim) if multi else None,
        temps=init_temperatures())


def _direction_update(src: FeatureMap, dst: FeatureMap,
                      src_pyr, dst_pyr, src_flow: FlowMap | None,
                      w: BlockWeights, config: GlaConfig) -> Tensor:
    coarse_s, medium_s, fine_s = src_pyr
    coarse_t, medium_t, fine_t = dst_pyr
    coarse_msg = global_attention(coarse_s, coarse_t, w.proj_coarse,
                                  w.temps.tau("coarse"))
    coarse_up = T.resize_bilinear(coarse_msg, src.height, src.width)
    if config.attention_mode == "single_level":
        fused = fuse_messages(coarse_up, None, None, w.fusion)
    else:
        fixed = (config.fixed_span_px
                 if config.attention_mode == "fixed_span" else None)
        fine_msg = local_cross_attention(
            fine_s, fine_t, src_flow, config.cell_size_fine,
            config.sigma_multiplier, config.samples_per_side,
            w.temps.tau("fine"), w.proj_fine, fixed_half_px=fixed)
        medium_flow = pool_flow(src_flow, 2)
        medium_msg = local_cross_attention(
            medium_s, medium_t, medium_flow, config.cell_size_medium,
            config.sigma_multiplier, config.samples_per_side,
            w.temps.tau("medium"), w.proj_medium, fixed_half_px=fixed)
        medium_up = T.resize_bilinear(medium_msg, src.height, src.width)
        fused = fuse_messages(coarse_up, medium_up, fine_msg, w.fusion)
    return ffn(src.grid, fused, w.ffn)


def gla_block(feat_a: FeatureMap, feat_b: FeatureMap, w: BlockWeights,
              config: GlaConfig):
    """One update round; returns new features and this block's flow maps
    (None in single-level mode, which needs no flow estimate)."""
    flow_a = flow_b = None
    if config.attention_mode != "single_level":
        flow_a = regress_flow(feat_a, w.flow_head)
        flow_b = regress_flow(feat_b, w.flow_head)
    h0, w0 = config.coarse_extent
    pyr_a = build_pyramid(feat_a, h0, w0)
    pyr_b = build_pyramid(feat_b, h0, w0)
    # span geometry reads flow values as constants; the flow head trains
    # through its own loss term
    guide_a = _detached_flow(flow_a)
    guide_b = _detached_flow(flow_b)
    out_a = _direction_update(feat_a, feat_b, pyr_a, pyr_b, guide_a, w, config)
    out_b = _direction_update(feat_b, feat_a, pyr_b, pyr_a, guide_b, w, config)
    return (FeatureMap(out_a, feat_a.stride, feat_a.image_extent),
            FeatureMap(out_b, feat_b.stride, feat_b.image_extent),
            flow_a, flow_b)


def _detached_flow(flow: FlowMap | None) -> FlowMap | None:
    if flow is None:
        return None
    return FlowMap(flow.grid.detach(), flow.stride, flow.image_extent)


@dataclass
class GlaWeights:
    init: InitWeights
    blocks: list


def init_gla_weights(rng: np.random.Generator, dim: int,
                     config: GlaConfig) -> GlaWeights:
    config.validate()
    return GlaWeights(
        init=init_init_weights(rng, dim, config.ffn_kernel),
        blocks=[init_block_weights(rng, dim, config)
                for _ in range(config.num_blocks)])


def run_stack(feat_a: FeatureMap, feat_b: FeatureMap, weights: GlaWeights,
              config: GlaConfig):
    """Initialization then N blocks; collects every block's flow maps."""
    feat_a, feat_b = init_block(feat_a, feat_b, weights.init, config.coarse_extent)
    flows: list[tuple[FlowMap, FlowMap]] = []
    for block in weights.blocks:
        feat_a, feat_b, flow_a, flow_b = gla_block(feat_a, feat_b, block, config)
        if flow_a is not None:
            flows.append((flow_a, flow_b))
    return feat_a, feat_b, flows


def _ffn_parameters(w: FfnWeights, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.kernel": w.kernel, f"{prefix}.bias": w.bias,
            f"{prefix}.ln_gain": w.ln_gain, f"{prefix}.ln_bias": w.ln_bias}


def gla_parameters(weights: GlaWeights, prefix: str = "gla") -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for i, rnd in enumerate(weights.init.rounds):
        params.update(proj_parameters(rnd.proj, f"{prefix}.init{i}.proj"))
        params.update(_ffn_parameters(rnd.ffn, f"{prefix}.init{i}.ffn"))
    for i, blk in enumerate(weights.blocks):
        base = f"{prefix}.block{i}"
        params.update(proj_parameters(blk.proj_coarse, f"{base}.proj_coarse"))
        if blk.proj_medium is not None:
            params.update(proj_parameters(blk.proj_medium, f"{base}.proj_medium"))
            params.update(proj_parameters(blk.proj_fine, f"{base}.proj_fine"))
        params.update({f"{base}.fusion.w1": blk.fusion.w1,
                       f"{base}.fusion.b1": blk.fusion.b1,
                       f"{base}.fusion.w2": blk.fusion.w2,
                       f"{base}.fusion.b2": blk.fusion.b2})
        params.update(_ffn_parameters(blk.ffn, f"{base}.ffn"))
        if blk.flow_head is not None:
            params.update({f"{base}.flow.w1": blk.flow_head.w1,
                           f"{base}.flow.b1": blk.flow_head.b1,
                           f"{base}.flow.w2": blk.flow_head.w2,
                           f"{base}.flow.b2": blk.flow_head.b2})
        params.update({f"{base}.log_tau_fine": blk.temps.log_tau_fine,
                       f"{base}.log_tau_medium": blk.temps.log_tau_medium,
                       f"{base}.log_tau_coarse": blk.temps.log_tau_coarse})
    return params

"""End-to-end matching model: backbone + positional encoding + attention
stack + matcher, with weight initialization, checkpointing and the
per-pair training losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matcher, synth
from . import tensor as T
from .backbone import (BackboneWeights, FeatureMap, backbone_parameters,
                       cell_center_px, extract_features, init_backbone_weights)
from .config import ModelConfig
from .encoding import add_pe, normalized_pe, pe_scales, sinusoidal_pe
from .flow import flow_loss
from .gla import GlaWeights, gla_parameters, init_gla_weights, run_stack
from .tensor import Tensor
from .tensor_io import load_weight_dir, save_weight_dir

MATCH_TAU_INIT = 10.0


@dataclass
class ModelWeights:
    backbone: BackboneWeights
    gla: GlaWeights
    match_log_tau: Tensor


def init_model_weights(rng: np.random.Generator, config: ModelConfig) -> ModelWeights:
    config.validate()
    return ModelWeights(
        backbone=init_backbone_weights(rng, config.in_channels, config.dim,
                                       config.refine_dim),
        gla=init_gla_weights(rng, config.dim, config.gla),
        match_log_tau=Tensor(np.log(MATCH_TAU_INIT), requires_grad=True))


def named_parameters(weights: ModelWeights) -> dict[str, Tensor]:
    params = backbone_parameters(weights.backbone)
    params.update(gla_parameters(weights.gla))
    params["matcher.log_tau"] = weights.match_log_tau
    return params


def save_checkpoint(directory, weights: ModelWeights, config: ModelConfig,
                    train_extent: tuple[int, int]) -> None:
    named = {name: t.data for name, t in named_parameters(weights).items()}
    from dataclasses import asdict
    save_weight_dir(directory, named, extra={
        "model_config": asdict(config),
        "train_extent": list(train_extent)})


def load_checkpoint(directory) -> tuple[ModelWeights, ModelConfig, tuple[int, int]]:
    named, extra = load_weight_dir(directory)
    from .config import model_config_from_dict
    config = model_config_from_dict(extra["model_config"])
    train_extent = tuple(extra["train_extent"])
    weights = init_model_weights(np.random.default_rng(0), config)
    params = named_parameters(weights)
    missing = set(params) - set(named)
    surplus = set(named) - set(params)
    if missing or surplus:
        raise ValueError(f"checkpoint/model mismatch: missing {sorted(missing)}, "
                         f"surplus {sorted(surplus)}")
    for name, tensor in params.items():
        if tensor.data.shape != named[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        tensor.data = np.asarray(named[name], dtype=np.float64)
    return weights, config, train_extent


@dataclass
class PairEncoding:
    feat_a: FeatureMap               # updated stride-8 features
    feat_b: FeatureMap
    fine_a: FeatureMap               # stride-2 refinement features
    fine_b: FeatureMap
    flows: list                      # per block: (FlowMap_A, FlowMap_B)
    pe_scale: tuple[float, float]    # (alpha, beta) used for the encoding


def encode_pair(image_a, image_b, weights: ModelWeights, config: ModelConfig,
                train_extent: tuple[int, int]) -> PairEncoding:
    """Backbone, positional encoding and the attention stack for one pair."""
    f8a, f2a = extract_features(image_a, weights.backbone)
    f8b, f2b = extract_features(image_b, weights.backbone)
    h8, w8 = f8a.height, f8a.width
    train_cells = (train_extent[0] // 8, train_extent[1] // 8)
    if config.npe:
        pe = normalized_pe(h8, w8, train_cells, config.dim)
        scale = pe_scales((h8, w8), train_cells)
    else:
        pe = sinusoidal_pe(h8, w8, config.dim)
        scale = (1.0, 1.0)
    f8a = FeatureMap(add_pe(f8a.grid, pe), f8a.stride, f8a.image_extent)
    f8b = FeatureMap(add_pe(f8b.grid, pe), f8b.stride, f8b.image_extent)
    feat_a, feat_b, flows = run_stack(f8a, f8b, weights.gla, config.gla)
    return PairEncoding(feat_a, feat_b, f2a, f2b, flows, scale)


def match_pair(image_a, image_b, weights: ModelWeights, config: ModelConfig,
               train_extent: tuple[int, int]):
    """Full inference: returns (MatchSet, PairEncoding, ScoreMatrix)."""
    with T.no_grad():
        enc = encode_pair(image_a, image_b, weights, config, train_extent)
        tau = T.exp(weights.match_log_tau)
        sm = matcher.score_matrix(enc.feat_a, enc.feat_b, tau)
        coarse = matcher.mnn_filter(sm, config.match_threshold)
        matches = matcher.refine_matches(
            coarse, enc.fine_a, enc.fine_b,
            (enc.feat_a.height, enc.feat_a.width),
            (enc.feat_b.height, enc.feat_b.width),
            coarse_stride=enc.feat_a.stride, window=config.refine_window)
    return matches, enc, sm


@dataclass
class PairLosses:
    coarse: Tensor
    fine: Tensor
    flow: Tensor
    total: Tensor
    n_gt_matches: int
    n_fine_supervised: int


def pair_losses(pair: synth.SynthPair, weights: ModelWeights, config: ModelConfig,
                flow_weight: float, train_extent: tuple[int, int]) -> PairLosses:
    """Training losses for one synthetic pair.

    The coarse loss supervises the dual-softmax scores at ground-truth
    cells; the fine loss refines at those same cells (the target is
    guaranteed near the window) and skips matches whose target falls
    outside the refinement window; the flow loss covers every block.
    """
    enc = encode_pair(Tensor(pair.image_a), Tensor(pair.image_b), weights,
                      config, train_extent)
    gt = synth.gt_coarse_matches(pair, stride=8)
    tau = T.exp(weights.match_log_tau)
    sm = matcher.score_matrix(enc.feat_a, enc.feat_b, tau)
    loss_c = matcher.coarse_loss(sm, gt)

    loss_f, n_fine = _fine_loss_at_gt_cells(pair, enc, gt, config)

    if enc.flows:
        gt_a, mask_a, gt_b, mask_b = synth.cell_supervision(pair, stride=8)
        loss_flow = flow_loss(enc.flows, (gt_a, gt_b), (mask_a, mask_b))
    else:
        loss_flow = Tensor(0.0)

    total = matcher.total_loss(loss_c, loss_f, loss_flow, flow_weight)
    return PairLosses(loss_c, loss_f, loss_flow, total, len(gt), n_fine)


def _fine_loss_at_gt_cells(pair, enc: PairEncoding, gt, config: ModelConfig):
    if not gt:
        return Tensor(0.0), 0
    a_xy, refined, variances = matcher.refine_coarse_matches(
        gt, enc.fine_a, enc.fine_b,
        (enc.feat_a.height, enc.feat_a.width),
        (enc.feat_b.height, enc.feat_b.width),
        coarse_stride=enc.feat_a.stride, window=config.refine_window)
    gt_xy = synth.apply_homography(pair.homography, a_xy)
    wc_b = enc.feat_b.width
    b_centers = np.array([[cell_center_px(j % wc_b, enc.feat_b.stride),
                           cell_center_px(j // wc_b, enc.feat_b.stride)]
                          for _, j in gt])
    half_px = (config.refine_window - 1) / 2.0 * enc.fine_b.stride
    keep = np.abs(gt_xy - b_centers).max(axis=1) <= half_px
    if not keep.any():
        return Tensor(0.0), 0
    idx = np.flatnonzero(keep)
    loss = matcher.fine_loss(refined[idx], gt_xy[idx], variances[idx])
    return loss, int(keep.sum())

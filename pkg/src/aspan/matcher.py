"""Coarse dual-softmax matching, mutual-nearest-neighbour filtering,
correlation-based sub-pixel refinement and the match losses.

Coarse matches live on the stride-8 grid as flattened row-major indices
(i into image A, j into image B). Refinement correlates the A center
vector against a w x w window sampled from the stride-2 maps around the
matched B cell and takes the softmax-heatmap expectation as the refined
coordinate.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import FeatureMap, cell_center_px, px_to_cell
from .tensor import Tensor

log = logging.getLogger(__name__)

FINE_VARIANCE_FLOOR = 1e-4


@dataclass
class ScoreMatrix:
    correlation: Tensor      # n x m, tau * <F_A, F_B> / d
    scores: Tensor           # n x m dual-softmax scores in [0, 1]
    shape_a: tuple[int, int]
    shape_b: tuple[int, int]


@dataclass
class MatchSet:
    coarse: list = field(default_factory=list)  # (i, j, score)
    fine: list = field(default_factory=list)    # (x_a, y_a, x_b, y_b, score)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for (x_a, y_a, x_b, y_b, score), (i, j, _) in zip(self.fine, self.coarse):
                fh.write(json.dumps({
                    "x_a": x_a, "y_a": y_a, "x_b": x_b, "y_b": y_b,
                    "score": score, "cell_a": int(i), "cell_b": int(j)}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "MatchSet":
        out = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            out.coarse.append((rec["cell_a"], rec["cell_b"], rec["score"]))
            out.fine.append((rec["x_a"], rec["y_a"], rec["x_b"], rec["y_b"],
                             rec["score"]))
        return out


def score_matrix(feat_a: FeatureMap, feat_b: FeatureMap, tau: Tensor) -> ScoreMatrix:
    """Correlation C = tau * (F_A F_B^T) / d and dual-softmax scores."""
    ha, wa, d = feat_a.grid.shape
    hb, wb, _ = feat_b.grid.shape
    scale = 1.0 / np.sqrt(d)
    fa = T.reshape(feat_a.grid, (ha * wa, d)) * scale
    fb = T.reshape(feat_b.grid, (hb * wb, d)) * scale
    corr = tau * T.matmul(fa, fb.T)
    scores = T.softmax(corr, axis=1) * T.softmax(corr, axis=0)
    return ScoreMatrix(corr, scores, (ha, wa), (hb, wb))


def mnn_filter(scores: ScoreMatrix, threshold: float) -> MatchSet:
    """Keep (i, j) iff mutual argmax and score >= threshold.

    Ties break toward the smaller index (first argmax occurrence).
    """
    s = scores.scores.data
    out = MatchSet()
    if s.size == 0:
        return out
    row_best = s.argmax(axis=1)
    col_best = s.argmax(axis=0)
    for i, j in enumerate(row_best):
        if col_best[j] == i and s[i, j] >= threshold:
            out.coarse.append((int(i), int(j), float(s[i, j])))
    return out


def _window_offsets(window: int) -> np.ndarray:
    half = (window - 1) / 2.0
    axis = np.arange(window) - half
    return np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)


def refine_coarse_matches(coarse_ids: list[tuple[int, int]],
                          fine_a: FeatureMap, fine_b: FeatureMap,
                          coarse_shape_a: tuple[int, int],
                          coarse_shape_b: tuple[int, int],
                          coarse_stride: float, window: int = 5):
    """Sub-pixel refinement of coarse matches on the stride-2 maps.

    Returns (a_centers_px (M,2) in (x, y), refined_b (M,2) Tensor in (x, y),
    variances (M,) Tensor of total heatmap variance in pixels^2).
    """
    if window % 2 == 0:
        raise T.ParameterError("refinement window must be odd")
    d = fine_a.dim
    offsets = _window_offsets(window)
    a_centers = []
    refined = []
    variances = []
    for i, j in coarse_ids:
        ra, ca = divmod(i, coarse_shape_a[1])
        rb, cb = divmod(j, coarse_shape_b[1])
        a_py = cell_center_px(float(ra), coarse_stride)
        a_px = cell_center_px(float(ca), coarse_stride)
        b_py = cell_center_px(float(rb), coarse_stride)
        b_px = cell_center_px(float(cb), coarse_stride)
        center_a = np.array([[px_to_cell(a_py, fine_a.stride),
                              px_to_cell(a_px, fine_a.stride)]])
        center_b = np.array([px_to_cell(b_py, fine_b.stride),
                             px_to_cell(b_px, fine_b.stride)])
        grid_b = offsets + center_b          # (w^2, 2) stride-2 grid coords
        anchor = T.bilinear_sample(fine_a.grid, center_a)       # 1 x d
        window_vecs = T.bilinear_sample(fine_b.grid, grid_b)    # w^2 x d
        logits = T.matmul(anchor, window_vecs.T) * (1.0 / np.sqrt(d))
        heat = T.reshape(T.softmax(logits, axis=1), (window * window, 1))
        # expectation and total variance in stride-2 grid units
        exp_rc = (heat * grid_b).sum(axis=0)
        var_rc = (heat * grid_b ** 2.0).sum(axis=0) - exp_rc ** 2.0
        refined_px = cell_center_px(exp_rc, fine_b.stride)
        a_centers.append((a_px, a_py))
        refined.append(T.reshape(refined_px[np.array([1, 0])], (1, 2)))  # to (x, y)
        variances.append(T.reshape(var_rc.sum() * fine_b.stride ** 2, (1,)))
    if not coarse_ids:
        return (np.zeros((0, 2)), Tensor(np.zeros((0, 2))), Tensor(np.zeros(0)))
    return (np.array(a_centers), T.concat(refined, axis=0), T.concat(variances, axis=0))


def refine_matches(coarse: MatchSet, fine_a: FeatureMap, fine_b: FeatureMap,
                   coarse_shape_a: tuple[int, int], coarse_shape_b: tuple[int, int],
                   coarse_stride: float = 8.0, window: int = 5) -> MatchSet:
    """Full refinement producing pixel-coordinate fine matches."""
    ids = [(i, j) for i, j, _ in coarse.coarse]
    with T.no_grad():
        a_xy, refined_xy, _ = refine_coarse_matches(
            ids, fine_a, fine_b, coarse_shape_a, coarse_shape_b,
            coarse_stride, window)
    out = MatchSet(coarse=list(coarse.coarse))
    for (x_a, y_a), xy, (_, _, score) in zip(a_xy, refined_xy.data, coarse.coarse):
        out.fine.append((float(x_a), float(y_a), float(xy[0]), float(xy[1]), score))
    return out


def coarse_loss(scores: ScoreMatrix, gt_matches: list[tuple[int, int]]) -> Tensor:
    """Mean negative log dual-softmax score over ground-truth cells."""
    if not gt_matches:
        log.warning("no ground-truth coarse matches; coarse loss is 0")
        return Tensor(0.0)
    rows = np.array([i for i, _ in gt_matches])
    cols = np.array([j for _, j in gt_matches])
    picked = scores.scores[rows, cols]
    return -T.log(picked).mean()


def fine_loss(refined_xy: Tensor, gt_xy: np.ndarray, variances: Tensor) -> Tensor:
    """Mean squared refinement error weighted by 1/variance.

    The heatmap variance acts as a constant weight (no gradient through
    it), floored to avoid blow-up on near-delta heatmaps.
    """
    n = refined_xy.shape[0]
    if n == 0:
        log.warning("no supervisable fine matches; fine loss is 0")
        return Tensor(0.0)
    weights = 1.0 / np.maximum(variances.data, FINE_VARIANCE_FLOOR)
    sq = ((refined_xy - gt_xy) ** 2.0).sum(axis=1)
    return (sq * weights).mean()


def total_loss(coarse: Tensor, fine: Tensor, flow: Tensor,
               flow_weight: float) -> Tensor:
    if flow_weight < 0:
        raise T.ParameterError("flow loss weight must be >= 0")
    return coarse + fine + flow_weight * flow

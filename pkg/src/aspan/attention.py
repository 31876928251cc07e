"""Attention kernels: global full cross attention and local cross
attention with flow-adaptive spans.

The local kernel partitions the query grid into S x S cells. Each cell
gets a rectangle on the target grid centered at the cell's mean flow
estimate with half-extents n * sigma (or a fixed width in the ablation
mode), clamped to a minimum of (g-1)/2 grid units and shifted inside the
grid. K/V are bilinearly sampled at a g x g lattice over the rectangle,
so every query attends to exactly g^2 tokens regardless of target size.

When a counter from `count_madds()` is active, the kernels tally the
interaction multiply-adds (score products, aggregation products and
sampling taps). The shared Q/K/V projections are not counted: they are
identical between the local and global paths and would mask the
asymptotic difference the counter exists to measure.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import FeatureMap, glorot_uniform, px_to_cell
from .flow import FlowMap
from .tensor import Tensor


class OpCounter:
    """Multiply-add tally, keyed by kernel stage."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def add(self, key: str, n: int) -> None:
        self.counts[key] = self.counts.get(key, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(
            {"total_madds": self.total, "by_stage": self.counts},
            indent=2, sort_keys=True) + "\n")


_counter: OpCounter | None = None


@contextmanager
def count_madds():
    global _counter
    prev = _counter
    counter = OpCounter()
    _counter = counter
    try:
        yield counter
    finally:
        _counter = prev


def _tally(key: str, n: float) -> None:
    if _counter is not None:
        _counter.add(key, int(n))


@dataclass
class ProjWeights:
    """Bias-free Q/K/V projections for one attention level."""
    wq: Tensor
    wk: Tensor
    wv: Tensor


def init_proj(rng: np.random.Generator, dim: int) -> ProjWeights:
    def w():
        return Tensor(glorot_uniform(rng, (dim, dim), dim, dim), requires_grad=True)
    return ProjWeights(w(), w(), w())


def proj_parameters(p: ProjWeights, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{f.name}": getattr(p, f.name) for f in fields(p)}


@dataclass
class TemperatureSet:
    """Per-level softmax temperatures, stored as logarithms so they stay
    positive under unconstrained updates."""
    log_tau_fine: Tensor
    log_tau_medium: Tensor
    log_tau_coarse: Tensor

    def tau(self, level: str) -> Tensor:
        return T.exp(getattr(self, f"log_tau_{level}"))


def init_temperatures() -> TemperatureSet:
    return TemperatureSet(Tensor(0.0, requires_grad=True),
                          Tensor(0.0, requires_grad=True),
                          Tensor(0.0, requires_grad=True))


@dataclass
class SpanCell:
    """One query cell's attention rectangle on the target grid."""
    row_range: tuple[int, int]       # [r0, r1) on the query grid
    col_range: tuple[int, int]
    center: tuple[float, float]      # (x, y) in target grid units
    half_extents: tuple[float, float]  # (h_x, h_y) in target grid units
    coords: np.ndarray               # g x g x 2 sample points, (row, col)


@dataclass
class SpanGrid:
    cells: list[SpanCell]
    target_extent: tuple[int, int]
    samples_per_side: int


def min_half_extent(samples_per_side: int) -> float:
    """Smallest half-extent that keeps sample spacing at one grid cell."""
    return (samples_per_side - 1) / 2.0


def _clamped_interval(center: float, half: float, extent: int) -> tuple[float, float]:
    """Shift a length-preserving interval inside [0, extent-1]."""
    width = min(2.0 * half, float(extent - 1))
    lo = min(max(center - half, 0.0), (extent - 1) - width)
    return lo, lo + width


def compute_span(flow: FlowMap, cell_size: int, sigma_multiplier: float,
                 target_extent: tuple[int, int], target_stride: float,
                 samples_per_side: int,
                 fixed_half_px: float | None = None) -> SpanGrid:
    """Partition the query grid into cells and size one rectangle per cell.

    Rectangle centers come from the mean flow over the cell converted to
    target grid units; half-extents are sigma_multiplier * mean sigma (or
    `fixed_half_px` when given), clamped below by (g-1)/2 and fitted
    inside the target grid. Flow values are read as constants: span
    geometry is guided by, not differentiated through, the flow estimate.
    """
    values = flow.values
    hq, wq = values.shape[:2]
    ht, wt = target_extent
    g = samples_per_side
    h_min = min_half_extent(g)
    cells = []
    for r0 in range(0, hq, cell_size):
        r1 = min(r0 + cell_size, hq)
        for c0 in range(0, wq, cell_size):
            c1 = min(c0 + cell_size, wq)
            block = values[r0:r1, c0:c1].reshape(-1, 4)
            mean_u = block[:, 0:2].mean(axis=0)
            mean_sigma = block[:, 2:4].mean(axis=0)
            cx = px_to_cell(mean_u[0], target_stride)
            cy = px_to_cell(mean_u[1], target_stride)
            if fixed_half_px is None:
                half_x = sigma_multiplier * mean_sigma[0] / target_stride
                half_y = sigma_multiplier * mean_sigma[1] / target_stride
            else:
                half_x = half_y = fixed_half_px / target_stride
            half_x = max(half_x, h_min)
            half_y = max(half_y, h_min)
            x0, x1 = _clamped_interval(cx, half_x, wt)
            y0, y1 = _clamped_interval(cy, half_y, ht)
            ys = np.linspace(y0, y1, g)
            xs = np.linspace(x0, x1, g)
            coords = np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1)
            cells.append(SpanCell((r0, r1), (c0, c1), (cx, cy),
                                  (half_x, half_y), coords))
    return SpanGrid(cells=cells, target_extent=(ht, wt), samples_per_side=g)


def _project(grid: Tensor, weight: Tensor) -> Tensor:
    h, w, d = grid.shape
    return T.reshape(T.matmul(T.reshape(grid, (h * w, d)), weight),
                     (h, w, weight.shape[1]))


def _attend(q: Tensor, k: Tensor, v: Tensor, tau: Tensor | float, stage: str) -> Tensor:
    """softmax(tau * QK^T / sqrt(d)) V for flattened token matrices."""
    dim = q.shape[1]
    logits = T.matmul(q, k.T) * (1.0 / np.sqrt(dim))
    _tally(stage + ".scores", q.shape[0] * k.shape[0] * dim)
    if isinstance(tau, Tensor):
        logits = tau * logits
        att = T.softmax(logits, axis=1)
    else:
        att = T.softmax(logits, axis=1, temperature=float(tau))
    out = T.matmul(att, v)
    _tally(stage + ".aggregate", q.shape[0] * k.shape[0] * dim)
    return out


def global_attention(source: FeatureMap, target: FeatureMap,
                     proj: ProjWeights, tau: Tensor | float = 1.0) -> Tensor:
    """Full cross attention; message aligned with the source grid."""
    hs, ws, d = source.grid.shape
    ht, wt, dt = target.grid.shape
    if dt != d:
        raise T.DimensionError(f"feature dims differ: {d} vs {dt}")
    q = T.matmul(T.reshape(source.grid, (hs * ws, d)), proj.wq)
    k = T.matmul(T.reshape(target.grid, (ht * wt, d)), proj.wk)
    v = T.matmul(T.reshape(target.grid, (ht * wt, d)), proj.wv)
    msg = _attend(q, k, v, tau, "global")
    return T.reshape(msg, (hs, ws, d))


def local_cross_attention(source: FeatureMap, target: FeatureMap, flow: FlowMap,
                          cell_size: int, sigma_multiplier: float,
                          samples_per_side: int, tau: Tensor | float,
                          proj: ProjWeights,
                          fixed_half_px: float | None = None) -> Tensor:
    """Adaptive-span local cross attention between same-level maps.

    Every query token in a cell attends to that cell's g^2 sampled target
    tokens, keeping the per-query cost constant in the target grid size.
    """
    d = source.grid.shape[2]
    span = compute_span(flow, cell_size, sigma_multiplier,
                        (target.height, target.width), target.stride,
                        samples_per_side, fixed_half_px=fixed_half_px)
    qmap = _project(source.grid, proj.wq)
    kmap = _project(target.grid, proj.wk)
    vmap = _project(target.grid, proj.wv)
    g2 = samples_per_side ** 2

    row_blocks: list[list[Tensor]] = []
    current_row = None
    for cell in span.cells:
        (r0, r1), (c0, c1) = cell.row_range, cell.col_range
        coords = cell.coords.reshape(g2, 2)
        k = T.bilinear_sample(kmap, coords)
        v = T.bilinear_sample(vmap, coords)
        _tally("local.sample", 2 * g2 * 4 * d)
        q = T.reshape(qmap[r0:r1, c0:c1], ((r1 - r0) * (c1 - c0), d))
        msg = _attend(q, k, v, tau, "local")
        block = T.reshape(msg, (r1 - r0, c1 - c0, d))
        if cell.row_range != current_row:
            row_blocks.append([])
            current_row = cell.row_range
        row_blocks[-1].append(block)
    rows = [blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=1)
            for blocks in row_blocks]
    return rows[0] if len(rows) == 1 else T.concat(rows, axis=0)

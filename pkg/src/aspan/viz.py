"""Matplotlib renderings written next to the delimited/JSON outputs:
match overlays, uncertainty heatmaps, span overlays, training curves,
scaling plots and ablation charts."""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.patches as mpatches  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402

from .attention import SpanGrid  # noqa: E402
from .backbone import cell_center_px  # noqa: E402
from .matcher import MatchSet  # noqa: E402


def _save(fig, path: str | Path) -> None:
    fig.savefig(Path(path), dpi=120, bbox_inches="tight")
    plt.close(fig)


def save_match_overlay(image_a: np.ndarray, image_b: np.ndarray,
                       matches: MatchSet, path: str | Path,
                       max_lines: int = 200) -> None:
    """Side-by-side pair with match lines colored by score."""
    h, wa = image_a.shape[:2]
    canvas = np.concatenate([image_a[..., 0], image_b[..., 0]], axis=1)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.imshow(canvas, cmap="gray", vmin=0, vmax=1)
    fine = matches.fine[:max_lines]
    if fine:
        scores = np.array([m[4] for m in fine])
        lo, hi = scores.min(), scores.max()
        span = hi - lo if hi > lo else 1.0
        cmap = plt.get_cmap("viridis")
        for x_a, y_a, x_b, y_b, score in fine:
            ax.plot([x_a, x_b + wa], [y_a, y_b], lw=0.8,
                    color=cmap((score - lo) / span))
            ax.plot([x_a], [y_a], ".", ms=2, color="red")
            ax.plot([x_b + wa], [y_b], ".", ms=2, color="red")
    ax.set_title(f"{len(matches.fine)} matches")
    ax.set_axis_off()
    _save(fig, path)


def save_uncertainty_heatmap(sigma_map: np.ndarray, path: str | Path) -> None:
    """Warmer color = smaller uncertainty (plots -log sigma)."""
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(-np.log(sigma_map), cmap="coolwarm", interpolation="nearest")
    fig.colorbar(im, ax=ax, label="-log sigma")
    ax.set_title("flow uncertainty")
    ax.set_axis_off()
    _save(fig, path)


def save_span_overlay(image_b: np.ndarray, span: SpanGrid, target_stride: float,
                      path: str | Path, max_cells: int = 16) -> None:
    """Attention rectangles of a subsample of query cells drawn on B."""
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image_b[..., 0], cmap="gray", vmin=0, vmax=1)
    cells = span.cells
    stride = max(1, len(cells) // max_cells)
    cmap = plt.get_cmap("tab10")
    for idx, cell in enumerate(cells[::stride]):
        cx, cy = cell.center
        hx, hy = cell.half_extents
        x0 = cell_center_px(cx - hx, target_stride)
        y0 = cell_center_px(cy - hy, target_stride)
        rect = mpatches.Rectangle(
            (x0, y0), 2 * hx * target_stride, 2 * hy * target_stride,
            fill=False, lw=1.2, color=cmap(idx % 10))
        ax.add_patch(rect)
    ax.set_title("attention spans")
    ax.set_axis_off()
    _save(fig, path)


def save_training_curves(epoch_rows: list[dict], path: str | Path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    epochs = [r["epoch"] for r in epoch_rows]
    for key in ("loss_total", "loss_coarse", "loss_fine", "loss_flow"):
        ax1.plot(epochs, [r[key] for r in epoch_rows], label=key.removeprefix("loss_"))
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [r["lr"] for r in epoch_rows], color="black")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    _save(fig, path)


def save_scaling_plot(scaling: dict, path: str | Path) -> None:
    rows = scaling["rows"]
    tokens = [r["tokens"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(tokens, [r["adaptive_madds"] for r in rows], "o-",
              label=f"adaptive span (slope {scaling['adaptive_slope']:.2f})")
    ax.loglog(tokens, [r["full_madds"] for r in rows], "s-",
              label=f"full attention (slope {scaling['full_slope']:.2f})")
    ax.set_xlabel("fine-level tokens")
    ax.set_ylabel("interaction multiply-adds")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    _save(fig, path)


def save_epe_per_block(per_block_epe: list[float], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(4, 3))
    blocks = np.arange(1, len(per_block_epe) + 1)
    ax.plot(blocks, per_block_epe, "o-")
    ax.set_xticks(blocks)
    ax.set_xlabel("block")
    ax.set_ylabel("flow EPE (px)")
    fig.tight_layout()
    _save(fig, path)


def save_ablation_chart(rows: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    modes = [r["attention_mode"] for r in rows]
    precision = [r["eval"]["precision"]["5px"] for r in rows]
    ax.bar(modes, precision, color=["#888", "#5a9", "#36c"])
    ax.set_ylabel("precision @ 5 px")
    ax.set_ylim(0, 1)
    for i, v in enumerate(precision):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=9)
    fig.tight_layout()
    _save(fig, path)

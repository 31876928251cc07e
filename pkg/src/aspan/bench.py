"""Asymptotic scaling benchmark: adaptive-span local attention vs full
global attention on the fine-level grid.

For each image size the kernels run on random features with the op
counter active; the log-log slope of interaction multiply-adds against
token count verifies linear vs quadratic growth. Wall times are recorded
for context but only the deterministic op counts feed the slope fit.
"""

from __future__ import annotations

import time

import numpy as np

from . import attention as A
from . import tensor as T
from .backbone import FeatureMap
from .config import GlaConfig
from .flow import FlowMap
from .tensor import Tensor

DEFAULT_SIZES = (64, 96, 128, 192)


def _random_level(rng, size_px: int, dim: int):
    side = size_px // 8
    src = FeatureMap(Tensor(rng.standard_normal((side, side, dim))), 8.0,
                     (size_px, size_px))
    tgt = FeatureMap(Tensor(rng.standard_normal((side, side, dim))), 8.0,
                     (size_px, size_px))
    grid = np.empty((side, side, 4))
    grid[..., 0:2] = rng.uniform(0, size_px, (side, side, 2))
    grid[..., 2:4] = rng.uniform(0.5, size_px / 4.0, (side, side, 2))
    flow = FlowMap(Tensor(grid), 8.0, (size_px, size_px))
    return src, tgt, flow


def run_scaling(sizes=DEFAULT_SIZES, dim: int = 64, config: GlaConfig | None = None,
                seed: int = 0) -> dict:
    if config is None:
        config = GlaConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBE0C]))
    proj = A.init_proj(rng, dim)
    rows = []
    for size in sizes:
        src, tgt, flow = _random_level(rng, size, dim)
        with T.no_grad():
            with A.count_madds() as counter:
                t0 = time.perf_counter()
                A.local_cross_attention(src, tgt, flow, config.cell_size_fine,
                                        config.sigma_multiplier,
                                        config.samples_per_side, 1.0, proj)
                adaptive_seconds = time.perf_counter() - t0
            adaptive = sum(v for k, v in counter.counts.items()
                           if k.startswith("local."))
            with A.count_madds() as counter:
                t0 = time.perf_counter()
                A.global_attention(src, tgt, proj)
                full_seconds = time.perf_counter() - t0
            full = sum(v for k, v in counter.counts.items()
                       if k.startswith("global."))
        tokens = (size // 8) ** 2
        rows.append({"size_px": size, "tokens": tokens,
                     "adaptive_madds": int(adaptive), "full_madds": int(full),
                     "adaptive_seconds": adaptive_seconds,
                     "full_seconds": full_seconds})
    tokens = np.log([r["tokens"] for r in rows])
    adaptive_slope = float(np.polyfit(tokens, np.log([r["adaptive_madds"]
                                                      for r in rows]), 1)[0])
    full_slope = float(np.polyfit(tokens, np.log([r["full_madds"]
                                                  for r in rows]), 1)[0])
    return {
        "rows": rows,
        "adaptive_slope": adaptive_slope,
        "full_slope": full_slope,
        "samples_per_query": config.samples_per_side ** 2,
    }


def scaling_csv(scaling: dict) -> str:
    lines = ["size_px,tokens,adaptive_madds,full_madds,adaptive_seconds,full_seconds"]
    for r in scaling["rows"]:
        lines.append(f"{r['size_px']},{r['tokens']},{r['adaptive_madds']},"
                     f"{r['full_madds']},{r['adaptive_seconds']:.6f},"
                     f"{r['full_seconds']:.6f}")
    lines.append(f"# adaptive_slope,{scaling['adaptive_slope']}")
    lines.append(f"# full_slope,{scaling['full_slope']}")
    return "\n".join(lines) + "\n"

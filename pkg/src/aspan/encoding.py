"""Sinusoidal positional encoding and its resolution-normalized variant.

Coordinates follow the grid convention used across the package: x indexes
the column (width) axis, y the row (height) axis, both starting at 0 on
the stride-8 feature grid. Channels 4k / 4k+1 encode sin / cos of w_k*x
and channels 4k+2 / 4k+3 encode sin / cos of w_k*y with frequencies
w_k = 1 / 10000^(4k/D).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ParameterError, Tensor, add


@dataclass
class PEMap:
    grid: np.ndarray                 # H x W x D, values in [-1, 1]
    frequencies: np.ndarray          # D/4 frequencies
    train_extent: tuple[int, int]    # (H_train, W_train) in grid cells


def _encode(xs: np.ndarray, ys: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    if dim % 4 != 0:
        raise ParameterError(f"encoding dimension must be divisible by 4, got {dim}")
    k = np.arange(dim // 4)
    freqs = 1.0 / (10000.0 ** (4.0 * k / dim))
    grid = np.empty((ys.size, xs.size, dim))
    gx = xs[None, :, None] * freqs[None, None, :]
    gy = ys[:, None, None] * freqs[None, None, :]
    grid[:, :, 0::4] = np.sin(gx)
    grid[:, :, 1::4] = np.cos(gx)
    grid[:, :, 2::4] = np.sin(np.broadcast_to(gy, (ys.size, xs.size, freqs.size)))
    grid[:, :, 3::4] = np.cos(np.broadcast_to(gy, (ys.size, xs.size, freqs.size)))
    return grid, freqs


def sinusoidal_pe(height: int, width: int, dim: int) -> PEMap:
    grid, freqs = _encode(np.arange(width, dtype=np.float64),
                          np.arange(height, dtype=np.float64), dim)
    return PEMap(grid=grid, frequencies=freqs, train_extent=(height, width))


def normalized_pe(test_height: int, test_width: int,
                  train_extent: tuple[int, int], dim: int) -> PEMap:
    """Encoding evaluated at coordinates rescaled by train/test ratios.

    With matching extents the scale factors are exactly 1 and the result
    is bitwise identical to `sinusoidal_pe`.
    """
    if test_height < 1 or test_width < 1:
        raise ParameterError("test extent must be positive")
    train_h, train_w = train_extent
    alpha = train_w / test_width
    beta = train_h / test_height
    grid, freqs = _encode(np.arange(test_width, dtype=np.float64) * alpha,
                          np.arange(test_height, dtype=np.float64) * beta, dim)
    return PEMap(grid=grid, frequencies=freqs, train_extent=(train_h, train_w))


def pe_scales(test_extent: tuple[int, int], train_extent: tuple[int, int]) -> tuple[float, float]:
    """(alpha, beta) width/height rescaling factors used by `normalized_pe`."""
    return train_extent[1] / test_extent[1], train_extent[0] / test_extent[0]


def add_pe(features: Tensor, pe: PEMap) -> Tensor:
    if features.shape != pe.grid.shape:
        raise ParameterError(
            f"feature/encoding shape mismatch: {features.shape} vs {pe.grid.shape}")
    return add(features, Tensor(pe.grid))

"""Small trainable convolutional feature extractor.

Three conv + ReLU + pool stages take the image to stride 8 with channel
schedule D/4 -> D/2 -> D; the refinement map at stride 2 is a linear
conv tap after the first stage. Weights use Glorot-uniform init.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .tensor import Tensor, as_tensor, avg_pool, conv3x3, relu


class InputError(ValueError):
    """The input image does not satisfy the extractor's preconditions."""


@dataclass
class FeatureMap:
    """A feature grid tied to the image it came from.

    `stride` is pixels per cell; the coarse pyramid level stores a float
    since its extent is fixed rather than derived from the input.
    """
    grid: Tensor                     # H x W x D
    stride: float
    image_extent: tuple[int, int]    # (H_img, W_img)

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def dim(self) -> int:
        return self.grid.shape[2]


def cell_center_px(index: np.ndarray | float, stride: float) -> np.ndarray | float:
    """Pixel coordinate of a cell center: index * stride + (stride-1)/2."""
    return index * stride + (stride - 1.0) / 2.0


def px_to_cell(px: np.ndarray | float, stride: float) -> np.ndarray | float:
    """Continuous cell coordinate of a pixel position (inverse of center map)."""
    return (px - (stride - 1.0) / 2.0) / stride


@dataclass
class BackboneWeights:
    conv1_k: Tensor
    conv1_b: Tensor
    conv2_k: Tensor
    conv2_b: Tensor
    conv3_k: Tensor
    conv3_b: Tensor
    fine_k: Tensor
    fine_b: Tensor


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _conv_init(rng, c_in: int, c_out: int) -> tuple[Tensor, Tensor]:
    k = glorot_uniform(rng, (3, 3, c_in, c_out), 9 * c_in, 9 * c_out)
    return Tensor(k, requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True)


def init_backbone_weights(rng: np.random.Generator, in_channels: int = 1,
                          dim: int = 64, refine_dim: int | None = None) -> BackboneWeights:
    if refine_dim is None:
        refine_dim = dim // 2
    c1, c2, c3 = dim // 4, dim // 2, dim
    k1, b1 = _conv_init(rng, in_channels, c1)
    k2, b2 = _conv_init(rng, c1, c2)
    k3, b3 = _conv_init(rng, c2, c3)
    kf, bf = _conv_init(rng, c1, refine_dim)
    return BackboneWeights(k1, b1, k2, b2, k3, b3, kf, bf)


def backbone_parameters(w: BackboneWeights, prefix: str = "backbone") -> dict[str, Tensor]:
    return {f"{prefix}.{f.name}": getattr(w, f.name) for f in fields(w)}


def extract_features(image, weights: BackboneWeights) -> tuple[FeatureMap, FeatureMap]:
    """Image (H x W x C) -> (stride-8 map of dim D, stride-2 map of dim D/2).

    ReLU sits between the conv+pool stages, not after the last one: the
    emitted features are linear so correlations are signed and
    discriminative rather than sharing a rectified common component.
    """
    image = as_tensor(image)
    if image.ndim != 3:
        raise InputError(f"image must be H x W x C, got shape {image.shape}")
    h, w, c = image.shape
    if h % 8 != 0 or w % 8 != 0:
        raise InputError(f"image extent must be divisible by 8, got {h} x {w}")
    if c != weights.conv1_k.shape[2]:
        raise InputError(
            f"image has {c} channels, extractor expects {weights.conv1_k.shape[2]}")
    x1 = avg_pool(conv3x3(image, weights.conv1_k, weights.conv1_b), 2)
    fine = conv3x3(x1, weights.fine_k, weights.fine_b)
    x2 = avg_pool(conv3x3(relu(x1), weights.conv2_k, weights.conv2_b), 2)
    x3 = avg_pool(conv3x3(relu(x2), weights.conv3_k, weights.conv3_b), 2)
    return (FeatureMap(x3, 8.0, (h, w)), FeatureMap(fine, 2.0, (h, w)))

"""Reverse-mode automatic differentiation over dense numpy arrays.

Every numeric primitive the matching pipeline needs lives here, each with
an analytic backward rule. Arrays are float64 throughout so that
`grad_check` (central finite differences) has enough headroom to verify
the rules; float32 is only ever produced by the file codec in
`tensor_io`, never used for computation.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(ValueError):
    """An operation parameter is outside its valid range."""


class GradCheckError(RuntimeError):
    """Gradient verification could not be completed (non-finite values)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus an accumulated gradient of the same shape.

    Ops return new tensors wired into a tape; `backward()` on a scalar
    result walks the tape in reverse topological order. Gradients are
    additive across uses of the same value.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this value into every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = _asarray(grad)
            if grad.shape != self.data.shape:
                raise DimensionError("seed gradient shape must match value shape")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                _accumulate(node, g)
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _raise_scalar(t: Tensor):
    raise DimensionError(f"item() on non-scalar tensor of shape {t.shape}")


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order, iterative to survive deep graphs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    order.reverse()
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; `backward(g)` yields (parent, parent_grad) pairs."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape)))

    return _make(data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    data = a.data ** e

    def backward(g):
        return ((a, g * e * a.data ** (e - 1.0)),)

    return _make(data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        return ((a, g * data),)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        return ((a, g / a.data),)

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        return ((a, g * 0.5 / data),)

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return ((a, g * data * (1.0 - data)),)

    return _make(data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        return ((a, g * (a.data > 0.0)),)

    return _make(data, (a,), backward)


# -- shape manipulation -----------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def backward(g):
        return ((a, g.reshape(a.shape)),)

    return _make(data, (a,), backward)


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return ((a, np.transpose(g, inverse)),)

    return _make(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(zip(tensors, pieces))

    return _make(data, tensors, backward)


def take(a, index) -> Tensor:
    """numpy-style indexing with scatter-add backward (duplicates safe)."""
    a = as_tensor(a)
    data = a.data[index]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return ((a, out),)

    return _make(np.array(data, dtype=np.float64), (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _make(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _make(data, (a, b), backward)


def softmax(x, axis: int, temperature: float = 1.0) -> Tensor:
    """Softmax of (temperature * x) along `axis`, max-stabilized.

    `temperature` is a plain positive float; a learnable temperature is
    applied by scaling `x` in the graph before the call.
    """
    if temperature <= 0.0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    x = as_tensor(x)
    z = temperature * x.data
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return ((x, temperature * s * (g - inner)),)

    return _make(s, (x,), backward)


# -- spatial ops (maps are H x W x D) ----------------------------------


def avg_pool(x, stride: int) -> Tensor:
    """Mean over each stride x stride window; edge windows over valid cells."""
    if not isinstance(stride, int) or stride < 1:
        raise ParameterError(f"pool stride must be a positive int, got {stride}")
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"avg_pool expects an H x W x D map, got {x.shape}")
    h, w, d = x.shape
    s = stride
    ho, wo = -(-h // s), -(-w // s)
    pad_h, pad_w = ho * s - h, wo * s - w
    padded = np.pad(x.data, ((0, pad_h), (0, pad_w), (0, 0)))
    sums = padded.reshape(ho, s, wo, s, d).sum(axis=(1, 3))
    rows = np.minimum(s, h - np.arange(ho) * s)
    cols = np.minimum(s, w - np.arange(wo) * s)
    counts = (rows[:, None] * cols[None, :]).astype(np.float64)
    data = sums / counts[:, :, None]

    def backward(g):
        per_cell = g / counts[:, :, None]
        gpad = np.broadcast_to(per_cell[:, None, :, None, :], (ho, s, wo, s, d))
        gx = gpad.reshape(ho * s, wo * s, d)[:h, :w, :]
        return ((x, np.ascontiguousarray(gx)),)

    return _make(data, (x,), backward)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Align-corners 1-D linear interpolation matrix (n_out x n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 2)
    t = pos - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i0 + 1), t)
    return m


def resize_bilinear(x, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize; exact identity at unchanged extents."""
    if out_h < 1 or out_w < 1:
        raise ParameterError("resize extents must be >= 1")
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"resize_bilinear expects an H x W x D map, got {x.shape}")
    h, w, _ = x.shape
    a = _interp_matrix(out_h, h)
    b = _interp_matrix(out_w, w)
    data = np.einsum("oi,pj,ijd->opd", a, b, x.data, optimize=True)

    def backward(g):
        return ((x, np.einsum("oi,pj,opd->ijd", a, b, g, optimize=True)),)

    return _make(data, (x,), backward)


def bilinear_sample(x, coords) -> Tensor:
    """Sample an H x W x D map at continuous (row, col) coordinates.

    Out-of-range coordinates clamp to the border. Differentiable in both
    the map values and the coordinates (zero coordinate gradient in the
    clamped regime).
    """
    x = as_tensor(x)
    coords = as_tensor(coords)
    if x.ndim != 3:
        raise DimensionError(f"bilinear_sample expects an H x W x D map, got {x.shape}")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(f"coords must be n x 2 (row, col), got {coords.shape}")
    h, w, d = x.shape
    r = np.clip(coords.data[:, 0], 0.0, h - 1.0)
    c = np.clip(coords.data[:, 1], 0.0, w - 1.0)
    r0 = np.clip(np.floor(r).astype(int), 0, max(h - 2, 0))
    c0 = np.clip(np.floor(c).astype(int), 0, max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    tr = (r - r0)[:, None]
    tc = (c - c0)[:, None]
    v00 = x.data[r0, c0]
    v01 = x.data[r0, c1]
    v10 = x.data[r1, c0]
    v11 = x.data[r1, c1]
    data = ((1 - tr) * (1 - tc) * v00 + (1 - tr) * tc * v01
            + tr * (1 - tc) * v10 + tr * tc * v11)

    def backward(g):
        out = []
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (r0, c0), (1 - tr) * (1 - tc) * g)
            np.add.at(gx, (r0, c1), (1 - tr) * tc * g)
            np.add.at(gx, (r1, c0), tr * (1 - tc) * g)
            np.add.at(gx, (r1, c1), tr * tc * g)
            out.append((x, gx))
        if coords.requires_grad:
            dr = ((1 - tc) * (v10 - v00) + tc * (v11 - v01)) * g
            dc = ((1 - tr) * (v01 - v00) + tr * (v11 - v10)) * g
            row_in = (coords.data[:, 0] > 0.0) & (coords.data[:, 0] < h - 1.0)
            col_in = (coords.data[:, 1] > 0.0) & (coords.data[:, 1] < w - 1.0)
            gc = np.stack([dr.sum(axis=1) * row_in, dc.sum(axis=1) * col_in], axis=1)
            out.append((coords, gc))
        return tuple(out)

    return _make(data, (x, coords), backward)


def conv3x3(x, kernel, bias) -> Tensor:
    """3x3 cross-correlation with zero padding 1; spatial shape preserved."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 3:
        raise DimensionError(f"conv3x3 expects an H x W x Din map, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise DimensionError(f"kernel must be 3 x 3 x Din x Dout, got {kernel.shape}")
    if kernel.shape[2] != x.shape[2]:
        raise DimensionError(
            f"channel mismatch: map has {x.shape[2]}, kernel expects {kernel.shape[2]}")
    if bias.shape != (kernel.shape[3],):
        raise DimensionError(f"bias must have shape ({kernel.shape[3]},), got {bias.shape}")
    h, w, _ = x.shape
    padded = np.pad(x.data, ((1, 1), (1, 1), (0, 0)))
    patches = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    # patches: H x W x Din x 3 x 3
    data = np.einsum("hwdij,ijdo->hwo", patches, kernel.data, optimize=True) + bias.data

    def backward(g):
        out = []
        if x.requires_grad:
            dpatch = np.einsum("hwo,ijdo->hwdij", g, kernel.data, optimize=True)
            gpad = np.zeros_like(padded)
            for i in range(3):
                for j in range(3):
                    gpad[i:i + h, j:j + w, :] += dpatch[:, :, :, i, j]
            out.append((x, gpad[1:h + 1, 1:w + 1, :]))
        if kernel.requires_grad:
            out.append((kernel, np.einsum("hwdij,hwo->ijdo", patches, g, optimize=True)))
        if bias.requires_grad:
            out.append((bias, g.sum(axis=(0, 1))))
        return tuple(out)

    return _make(data, (x, kernel, bias), backward)


LAYER_NORM_EPS = 1e-6


def layer_norm(x, gain, bias) -> Tensor:
    """Per-position normalization over the trailing channel axis."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    data = gain.data * xhat + bias.data

    def backward(g):
        out = []
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            out.append((x, inv * (gh - m1 - xhat * m2)))
        if gain.requires_grad:
            out.append((gain, (g * xhat).reshape(-1, d).sum(axis=0)))
        if bias.requires_grad:
            out.append((bias, g.reshape(-1, d).sum(axis=0)))
        return tuple(out)

    return _make(data, (x, gain, bias), backward)


def mlp_forward(x, layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Affine chain with ReLU between layers and none after the last."""
    out = as_tensor(x)
    last = len(layers) - 1
    for i, (weight, b) in enumerate(layers):
        out = add(matmul(out, weight), b)
        if i != last:
            out = relu(out)
    return out


# -- verification ------------------------------------------------------


def grad_check(fn: Callable[..., Tensor], inputs: Iterable[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `fn` must reduce to a scalar. The relative error denominator is
    max(|analytic|, |numeric|, 1e-8) elementwise.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = fn(*inputs)
    if out.data.size != 1:
        raise GradCheckError("grad_check expects a scalar-valued closure")
    if not np.isfinite(out.data).all():
        raise GradCheckError("non-finite forward value")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]
    if any(not np.isfinite(a).all() for a in analytic):
        raise GradCheckError("non-finite analytic gradient")
    max_rel = 0.0
    with no_grad():
        for t, ana in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + eps
                f_plus = float(fn(*inputs).data.reshape(-1)[0])
                flat[i] = saved - eps
                f_minus = float(fn(*inputs).data.reshape(-1)[0])
                flat[i] = saved
                num = (f_plus - f_minus) / (2.0 * eps)
                if not math.isfinite(num):
                    raise GradCheckError("non-finite numeric gradient")
                denom = max(abs(num), abs(ana_flat[i]), 1e-8)
                max_rel = max(max_rel, abs(num - ana_flat[i]) / denom)
    return max_rel

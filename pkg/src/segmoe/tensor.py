"""Reverse-mode autodiff over float64 numpy arrays.

Covers exactly the ops the segmentation nets, gates, losses, and attacks
need.  Graphs are recorded on the fly (only while some input requires
grad) and walked once per `backward` call; gradients of requires-grad
tensors accumulate across calls until `zero_grads`.
"""

from __future__ import annotations

from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars take a cheap path without constant nodes
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / other)


class IntMask:
    """Integer class mask, shape (H, W) or (N, H, W), entries in [0, K)."""

    __slots__ = ("data", "num_classes")

    def __init__(self, data, num_classes: int):
        arr = np.ascontiguousarray(data, dtype=np.int64)
        if arr.ndim not in (2, 3):
            raise ShapeError(f"mask must be 2-D or 3-D, got {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(
                f"mask entries must lie in [0, {num_classes}), got range "
                f"[{arr.min()}, {arr.max()}]"
            )
        self.data = arr
        self.num_classes = num_classes

    @property
    def shape(self):
        return self.data.shape


def _as_mask_array(target, num_classes: int) -> np.ndarray:
    if isinstance(target, IntMask):
        if target.num_classes != num_classes:
            raise ShapeError(
                f"mask classes {target.num_classes} != logits classes {num_classes}"
            )
        return target.data
    return IntMask(target, num_classes).data


# ---------------------------------------------------------------------------
# graph machinery

def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _put(grads: dict, t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor):
    """Backpropagate from a scalar, accumulating into .grad buffers."""
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar, got shape {loss.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            topo.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if id(p) not in visited:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(topo):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        if t._backward_fn is not None:
            t._backward_fn(g, grads)


def zero_grads(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None


def assert_finite(t: Tensor, what: str = "tensor"):
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise and shape ops

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bval = float(b)
        data = a.data + bval

        def back(g, grads):
            _put(grads, a, g)

        return _make(data, (a,), back)
    data = a.data + b.data

    def back(g, grads):
        _put(grads, a, _unbroadcast(g, a.data.shape))
        _put(grads, b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    data = a.data * b.data

    def back(g, grads):
        _put(grads, a, _unbroadcast(g * b.data, a.data.shape))
        _put(grads, b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * s

    def back(g, grads):
        _put(grads, a, g * s)

    return _make(data, (a,), back)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def back(g, grads):
        _put(grads, a, g * (a.data > 0.0))

    return _make(data, (a,), back)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"maximum shapes differ: {a.data.shape} vs {b.data.shape}")
    mask = a.data >= b.data
    data = np.where(mask, a.data, b.data)

    def back(g, grads):
        _put(grads, a, g * mask)
        _put(grads, b, g * ~mask)

    return _make(data, (a, b), back)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient on the closed interval [lo, hi]."""
    data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def back(g, grads):
        _put(grads, a, g * mask)

    return _make(data, (a,), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g, grads):
        if axis is None:
            _put(grads, a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _put(grads, a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), back)


def tmean(a: Tensor) -> Tensor:
    return scale(tsum(a), 1.0 / a.size)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def back(g, grads):
        _put(grads, a, g.reshape(a.data.shape))

    return _make(data, (a,), back)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def back(g, grads):
        _put(grads, a, np.ascontiguousarray(g.transpose(inv)))

    return _make(data, (a,), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.data.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)
    ts = tuple(tensors)

    def back(g, grads):
        for i, t in enumerate(ts):
            _put(grads, t, np.take(g, i, axis=axis))

    return _make(data, ts, back)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    base = tensors[0].data.shape
    for t in tensors:
        s = t.data.shape
        if len(s) != 4 or s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(f"concat_channels shapes incompatible: {base} vs {s}")
    data = np.concatenate([t.data for t in tensors], axis=1)
    ts = tuple(tensors)
    offsets = np.cumsum([0] + [t.data.shape[1] for t in ts])

    def back(g, grads):
        for i, t in enumerate(ts):
            _put(grads, t, np.ascontiguousarray(g[:, offsets[i] : offsets[i + 1]]))

    return _make(data, ts, back)


# ---------------------------------------------------------------------------
# network ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def back(g, grads):
        if a.requires_grad:
            _put(grads, a, g @ b.data.T)
        if b.requires_grad:
            _put(grads, b, a.data.T @ g)

    return _make(data, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[N,I] @ weight[I,O] + bias[O]."""
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(f"bias shape {bias.data.shape} != ({weight.data.shape[1]},)")
    return add(matmul(x, weight), reshape(bias, (1, -1)))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, FCkk weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, c, h, w = x.data.shape
    f, cw, kh, kw = weight.data.shape
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, weight {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel dims must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride={stride} padding={padding}")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ShapeError(
            f"conv2d output size not integral for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    if bias is not None and bias.data.shape != (f,):
        raise ShapeError(f"bias shape {bias.data.shape} != ({f},)")
    data = kernels.conv2d_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        data = data + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g, grads):
        if x.requires_grad:
            _put(grads, x, kernels.conv2d_backward_input(g, weight.data, stride, padding, h, w))
        if weight.requires_grad:
            _put(grads, weight, kernels.conv2d_backward_weight(g, x.data, kh, kw, stride, padding))
        if bias is not None and bias.requires_grad:
            _put(grads, bias, g.sum(axis=(0, 2, 3)))

    return _make(data, parents, back)


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC spatial mean."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool expects a 4-D tensor")
    n, c, h, w = x.data.shape
    data = x.data.mean(axis=(2, 3))

    def back(g, grads):
        _put(grads, x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy())

    return _make(data, (x,), back)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError("upsample_nearest2x expects a 4-D tensor")
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    n, c, h, w = x.data.shape

    def back(g, grads):
        _put(grads, x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(data, (x,), back)


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x downsampling stage: mean over non-overlapping 2x2 blocks."""
    if x.ndim != 4:
        raise ShapeError("avg_pool2x2 expects a 4-D tensor")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial dims, got {h}x{w}")
    data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g, grads):
        _put(grads, x, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return _make(data, (x,), back)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Max-subtracted softmax along `axis`."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g, grads):
        dot = (g * p).sum(axis=axis, keepdims=True)
        _put(grads, x, p * (g - dot))

    return _make(p, (x,), back)


def softmax_channel(x: Tensor) -> Tensor:
    return softmax(x, axis=1)


# ---------------------------------------------------------------------------
# losses

def cross_entropy_mean(logits: Tensor, target) -> Tensor:
    """Mean pixel cross-entropy of NKHW logits against an integer mask."""
    if logits.ndim != 4:
        raise ShapeError("cross_entropy_mean expects NKHW logits")
    n, k, h, w = logits.data.shape
    tgt = _as_mask_array(target, k)
    if tgt.ndim == 2:
        tgt = tgt[None]
    if tgt.shape != (n, h, w):
        raise ShapeError(f"mask shape {tgt.shape} != {(n, h, w)}")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True)) + m  # [N,1,H,W]
    picked = np.take_along_axis(logits.data, tgt[:, None], axis=1)
    npix = n * h * w
    data = np.asarray((lse - picked).sum() / npix)

    def back(g, grads):
        p = np.exp(logits.data - lse)
        np.put_along_axis(p, tgt[:, None], np.take_along_axis(p, tgt[:, None], axis=1) - 1.0, axis=1)
        _put(grads, logits, p * (float(g.reshape(-1)[0]) / npix))

    return _make(data, (logits,), back)


def nll_mean_probs(probs: Tensor, target) -> Tensor:
    """Mean pixel negative log-likelihood of NKHW probabilities.

    Renormalizes along the class axis first, so inputs that are not a
    distribution (e.g. elementwise maxima) are handled consistently.
    """
    if probs.ndim != 4:
        raise ShapeError("nll_mean_probs expects NKHW probabilities")
    n, k, h, w = probs.data.shape
    tgt = _as_mask_array(target, k)
    if tgt.ndim == 2:
        tgt = tgt[None]
    if tgt.shape != (n, h, w):
        raise ShapeError(f"mask shape {tgt.shape} != {(n, h, w)}")
    if probs.data.min() <= 0.0:
        raise ValueError("nll_mean_probs requires strictly positive probabilities")
    s = probs.data.sum(axis=1, keepdims=True)  # [N,1,H,W]
    picked = np.take_along_axis(probs.data, tgt[:, None], axis=1)
    npix = n * h * w
    data = np.asarray((np.log(s) - np.log(picked)).sum() / npix)

    def back(g, grads):
        d = np.broadcast_to(1.0 / s, probs.data.shape).copy()
        np.put_along_axis(d, tgt[:, None], np.take_along_axis(d, tgt[:, None], axis=1) - 1.0 / picked, axis=1)
        _put(grads, probs, d * (float(g.reshape(-1)[0]) / npix))

    return _make(data, (probs,), back)

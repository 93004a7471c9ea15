"""Minimal dense-tensor engine with analytic reverse-mode gradients.

Every op takes :class:`Tensor` operands, computes its result with numpy and,
when any operand requires a gradient, records a closure that maps the
output gradient back onto the operands.  ``Tensor.backward`` replays those
closures in reverse topological order.

Activations use NCHW layout.  Ops preserve the floating dtype of their
operands: models run in float32, gradient checks promote everything to
float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import AdapterError, DegenerateBatchError, ShapeError

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_recording = True


@contextlib.contextmanager
def no_grad():
    """Within the block ops record no backward closures, so intermediates are freed early."""
    global _recording
    saved, _recording = _recording, False
    try:
        yield
    finally:
        _recording = saved


class Tensor:
    """An n-d array with an optional gradient buffer and its producing op."""

    __slots__ = ("data", "grad", "requires_grad", "retain", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.retain = False
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep this intermediate's gradient after ``backward`` finishes."""
        self.retain = True
        return self

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Reverse-mode sweep from this tensor.

        Leaf gradients accumulate across calls; intermediate gradients are
        released once consumed unless :meth:`retain_grad` was called.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        self._accumulate(np.asarray(grad, dtype=self.data.dtype).reshape(self.shape))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            if not node.retain:
                node.grad = None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_4d(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (N, C, H, W), got shape {t.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with filters ``w`` (O, C, kh, kw)."""
    _check_4d(x, "conv2d input")
    _check_4d(w, "conv2d filters")
    if stride < 1 or pad < 0:
        raise ValueError(f"stride must be positive and pad non-negative, got stride={stride}, pad={pad}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs filters {w.shape}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: input {x.shape}, filters {w.shape}, stride {stride}, pad {pad}")

    if kh == 1 and kw == 1 and pad == 0:
        return _conv1x1(x, w, stride, ho, wo)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray) -> None:
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if w.requires_grad:
            w._accumulate((g2.T @ cols).reshape(w.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
            x._accumulate(dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp)

    return _result(out, (x, w), backward)


def _conv1x1(x: Tensor, w: Tensor, stride: int, ho: int, wo: int) -> Tensor:
    n, c = x.shape[:2]
    o = w.shape[0]
    xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
    xs = np.ascontiguousarray(xs).reshape(n, c, ho * wo)
    wmat = w.data.reshape(o, c)
    out = np.matmul(wmat, xs).reshape(n, o, ho, wo)

    def backward(g: np.ndarray) -> None:
        g3 = g.reshape(n, o, ho * wo)
        if w.requires_grad:
            w._accumulate(np.tensordot(g3, xs, axes=([0, 2], [0, 2])).reshape(w.shape))
        if x.requires_grad:
            dxs = np.matmul(wmat.T, g3).reshape(n, c, ho, wo)
            if stride > 1:
                dx = np.zeros(x.shape, dtype=x.dtype)
                dx[:, :, ::stride, ::stride] = dxs
                x._accumulate(dx)
            else:
                x._accumulate(dxs)

    return _result(out, (x, w), backward)


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def astype(self, dtype) -> "BatchNormState":
        return BatchNormState(self.running_mean.astype(dtype), self.running_var.astype(dtype), self.momentum, self.eps)


def batchnorm(x: Tensor, scale: Tensor, shift: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    In training mode the batch statistics are used and ``state`` is updated in
    place (running = momentum * running + (1 - momentum) * batch, with the
    unbiased variance); in eval mode the running statistics are used.
    """
    _check_4d(x, "batchnorm input")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"batchnorm parameters must have shape ({c},), got scale {scale.shape}, shift {shift.shape}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    eps = state.eps
    if training:
        if m < 2:
            raise DegenerateBatchError(f"batchnorm needs at least 2 values per channel in training mode, input shape {x.shape}")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean[...] = mom * state.running_mean + (1 - mom) * mean
        state.running_var[...] = mom * state.running_var + (1 - mom) * var * (m / (m - 1))
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
        centered = x.data - mean[None, :, None, None]
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        if scale.requires_grad:
            scale._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * scale.data[None, :, None, None]
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv_std[None, :, None, None]
            x._accumulate(dx)

    return _result(out, (x, scale, shift), backward)


# ---------------------------------------------------------------------------
# elementwise, pooling, dense
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * (x.data > 0))

    return _result(out, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add operands differ in shape: {a.shape} vs {b.shape}")
    return sum_tensors([a, b])


def sum_tensors(terms: Sequence[Tensor]) -> Tensor:
    """Left-to-right elementwise sum of equally shaped tensors."""
    if not terms:
        raise ValueError("sum_tensors needs at least one operand")
    shape = terms[0].shape
    for t in terms[1:]:
        if t.shape != shape:
            raise ShapeError(f"sum operands differ in shape: {shape} vs {t.shape}")
    out = np.array(terms[0].data, copy=True)
    for t in terms[1:]:
        out += t.data

    def backward(g: np.ndarray) -> None:
        for t in terms:
            if t.requires_grad:
                t._accumulate(g)

    return _result(out, tuple(terms), backward)


def mean_tensors(terms: Sequence[Tensor]) -> Tensor:
    """Elementwise mean, accumulated in float64 so that identical operands average to themselves exactly."""
    if not terms:
        raise ValueError("mean_tensors needs at least one operand")
    shape = terms[0].shape
    for t in terms[1:]:
        if t.shape != shape:
            raise ShapeError(f"mean operands differ in shape: {shape} vs {t.shape}")
    acc = terms[0].data.astype(np.float64)
    for t in terms[1:]:
        acc = acc + t.data
    k = len(terms)
    out = (acc / k).astype(terms[0].dtype)

    def backward(g: np.ndarray) -> None:
        share = g / k
        for t in terms:
            if t.requires_grad:
                t._accumulate(share)

    return _result(out, tuple(terms), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)``; a linear probe used as a test loss."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise ShapeError(f"weighted_sum weights {weights.shape} do not match input {x.shape}")
    out = np.asarray((x.data * weights).sum(), dtype=x.dtype)

    def backward(g: np.ndarray) -> None:
        x._accumulate(weights * g)

    return _result(out, (x,), backward)


def scale(x: Tensor, alpha: float) -> Tensor:
    out = x.data * x.dtype.type(alpha)

    def backward(g: np.ndarray) -> None:
        x._accumulate(g * x.dtype.type(alpha))

    return _result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool input")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g: np.ndarray) -> None:
        x._accumulate(np.broadcast_to((g / (h * w))[:, :, None, None], x.shape))

    return _result(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in) and ``weight`` of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _result(out, parents, backward)


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean multi-class cross-entropy of ``logits`` (N, classes) against integer ``labels``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent expects logits (N, K) and labels (N,), got {logits.shape} and {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(n)
    loss = float(np.mean(logsum - z[idx, labels]))
    out = np.asarray(loss, dtype=logits.dtype)

    def backward(g: np.ndarray) -> None:
        p = np.exp(z - logsum[:, None])
        p[idx, labels] -= 1.0
        logits._accumulate((p * (float(g) / n)).astype(logits.dtype))

    return _result(out, (logits,), backward)


def avg_downsample(x: Tensor, factor: int) -> Tensor:
    """Mean over non-overlapping ``factor`` x ``factor`` windows."""
    _check_4d(x, "avg_downsample input")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise AdapterError(f"cannot average-downsample spatial size {h}x{w} by factor {factor}")
    ho, wo = h // factor, w // factor
    out = x.data.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))

    def backward(g: np.ndarray) -> None:
        share = (g / (factor * factor))[:, :, :, None, :, None]
        x._accumulate(np.broadcast_to(share, (n, c, ho, factor, wo, factor)).reshape(x.shape))

    return _result(out, (x,), backward)


def zero_pad_channels(x: Tensor, target_channels: int) -> Tensor:
    """Append zero-valued channels up to ``target_channels``."""
    _check_4d(x, "zero_pad_channels input")
    n, c, h, w = x.shape
    if target_channels < c:
        raise AdapterError(f"cannot pad {c} channels down to {target_channels}")
    if target_channels == c:
        return x
    out = np.zeros((n, target_channels, h, w), dtype=x.dtype)
    out[:, :c] = x.data

    def backward(g: np.ndarray) -> None:
        x._accumulate(g[:, :c])

    return _result(out, (x,), backward)


def adapt(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Parameter-free shape adapter: spatial average-downsampling, then zero channel padding.

    ``shape`` is the target (C, H, W).
    """
    c, h, w = shape
    _, xc, xh, xw = x.shape
    if xh % h or xw % w or xh // h != xw // w:
        raise AdapterError(f"spatial size {xh}x{xw} is not an integral multiple of {h}x{w}")
    return zero_pad_channels(avg_downsample(x, xh // h), c)


def adapt_array(x: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Same as :func:`adapt` on a raw array, without recording gradients."""
    return adapt(Tensor(x), shape).data


def parameters_as(tensors: Iterable[Tensor], dtype) -> None:
    """Cast tensors in place (used to promote a model to float64 for gradient checks)."""
    for t in tensors:
        t.data = t.data.astype(dtype)
        t.grad = None

"""Layer primitives: convolution, max-pooling, ReLU, inner product, softmax loss, SGD.

Tensors are plain numpy arrays in count x height x width x channels order
(C-contiguous, so the flat data is count-major, then row, column, channel).
Every spatial op accepts a single H x W x C tensor or a batch N x H x W x C
and returns the same rank it was given.  Arithmetic stays in the dtype of the
input: float32 for training and inference, float64 for gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor dimensions do not agree."""


def as_tensor(x, rank: int | tuple[int, ...] | None = None, name: str = "tensor") -> np.ndarray:
    """Validate ``x`` as a dense tensor with positive dimensions."""
    x = np.asarray(x)
    if x.ndim == 0 or x.ndim > 4:
        raise ShapeError(f"{name}: rank {x.ndim} not in 1..4")
    if rank is not None:
        ranks = (rank,) if isinstance(rank, int) else rank
        if x.ndim not in ranks:
            raise ShapeError(f"{name}: expected rank {ranks}, got shape {x.shape}")
    if any(d < 1 for d in x.shape):
        raise ShapeError(f"{name}: all dimensions must be >= 1, got {x.shape}")
    return x


def _batched(x, name):
    x = as_tensor(x, rank=(3, 4), name=name)
    return (x[None], True) if x.ndim == 3 else (x, False)


# ---------------------------------------------------------------- convolution

def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def _im2col(x, k, stride):
    # (N, H, W, C) -> (N, H', W', k, k, C) view, then a contiguous copy
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _check_conv(x, filters, bias, stride):
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    filters = as_tensor(filters, rank=4, name="filters")
    nf, k, k2, fc = filters.shape
    if k != k2:
        raise ShapeError(f"filters must be square, got kernel {k}x{k2}")
    _, h, w, c = x.shape
    if c != fc:
        raise ShapeError(f"channel depth mismatch: input has {c}, filters expect {fc}")
    if h < k:
        raise ShapeError(f"input height {h} smaller than kernel {k}")
    if w < k:
        raise ShapeError(f"input width {w} smaller than kernel {k}")
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (nf,):
            raise ShapeError(f"bias length {bias.shape} does not match filter count {nf}")
    return filters, bias


def conv2d_forward(x, filters, bias, stride: int = 1, return_cols: bool = False):
    """Valid cross-correlation of ``x`` with ``filters`` (F x k x k x C) plus bias.

    With ``return_cols`` the unfolded input windows are returned as well so a
    later :func:`conv2d_backward` can skip recomputing them.
    """
    xb, single = _batched(x, "input")
    filters, bias = _check_conv(xb, filters, bias, stride)
    nf, k = filters.shape[:2]
    cols = _im2col(xb, k, stride)
    n, ho, wo = cols.shape[:3]
    cols = cols.reshape(n * ho * wo, -1)
    out = cols @ filters.reshape(nf, -1).T
    out += bias
    out = out.reshape(n, ho, wo, nf)
    if single:
        out = out[0]
    return (out, cols) if return_cols else out


def conv2d_backward(x, filters, stride: int, grad_out, cols=None, input_grad: bool = True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, filters and bias.

    ``input_grad=False`` skips the input gradient (returned as None), which
    is all a first layer needs.
    """
    xb, single = _batched(x, "input")
    filters, _ = _check_conv(xb, filters, None, stride)
    nf, k = filters.shape[:2]
    n, h, w, c = xb.shape
    ho, wo = conv_output_size(h, k, stride), conv_output_size(w, k, stride)
    g = np.asarray(grad_out)
    if single:
        g = g[None]
    if g.shape != (n, ho, wo, nf):
        raise ShapeError(f"upstream gradient shape {g.shape[int(single):]} != conv output "
                         f"{(n, ho, wo, nf)[int(single):]}")
    g2 = g.reshape(-1, nf)
    if cols is None:
        cols = _im2col(xb, k, stride)
    cols = cols.reshape(g2.shape[0], -1)
    grad_w = (cols.T @ g2).T.reshape(filters.shape)
    grad_b = g2.sum(axis=0)
    if not input_grad:
        return None, grad_w, grad_b
    # col2im one kernel offset at a time keeps every GEMM output contiguous
    grad_x = np.zeros_like(xb)
    for i in range(k):
        for j in range(k):
            part = (g2 @ filters[:, i, j, :]).reshape(n, ho, wo, c)
            grad_x[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += part
    return (grad_x[0] if single else grad_x), grad_w, grad_b


# ---------------------------------------------------------------- max pooling

def pool_output_size(size: int, kernel: int, stride: int) -> int:
    """Ceil-mode output size; the last window may hang over the border."""
    return int(ceil((size - kernel) / stride)) + 1


def maxpool_forward(x, kernel: int, stride: int):
    """Max-pool with ceil rounding and border-clipped windows.

    Returns ``(out, argmax)`` where ``argmax`` holds, for each output element,
    the flat ``row * W + col`` index of the winning input pixel in its channel.
    Ties go to the first element in row-major scan order of the window.
    """
    xb, single = _batched(x, "input")
    if kernel < 1 or stride < 1:
        raise ShapeError(f"kernel and stride must be >= 1, got {kernel}, {stride}")
    n, h, w, c = xb.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"pooling kernel {kernel} larger than input {h}x{w}")
    ho, wo = pool_output_size(h, kernel, stride), pool_output_size(w, kernel, stride)
    hp, wp = (ho - 1) * stride + kernel, (wo - 1) * stride + kernel
    padded = np.full((n, hp, wp, c), -np.inf, dtype=xb.dtype)
    padded[:, :h, :w] = xb
    slices = [padded[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride]
              for di in range(kernel) for dj in range(kernel)]
    # pairwise tournament; the earlier offset wins ties, so the first maximum
    # in row-major window order is kept
    level = [(cand, np.int8(o)) for o, cand in enumerate(slices)]
    while len(level) > 1:
        nxt = []
        for (va, ia), (vb, ib) in zip(level[::2], level[1::2]):
            better = vb > va
            if np.ndim(ia) == 0 and np.ndim(ib) == 0:
                idx = better.view(np.int8) * np.int8(ib - ia) + np.int8(ia)
            else:
                idx = np.where(better, ib, ia)
            nxt.append((np.maximum(va, vb), idx))
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    out, best = level[0]
    if len(slices) == 1:
        out = out.copy()
    best = np.broadcast_to(best, out.shape).astype(np.int32)
    rows = np.arange(ho, dtype=np.int32)[:, None, None] * stride + best // kernel
    cols = np.arange(wo, dtype=np.int32)[None, :, None] * stride + best % kernel
    argmax = rows * w + cols
    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool_backward(argmax, grad_out, input_shape) -> np.ndarray:
    """Route ``grad_out`` back to the recorded argmax positions (accumulating)."""
    argmax = np.asarray(argmax)
    g = np.asarray(grad_out)
    input_shape = tuple(int(d) for d in input_shape)
    if g.shape != argmax.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != pooled shape {argmax.shape}")
    single = len(input_shape) == 3
    if single:
        input_shape, argmax, g = (1,) + input_shape, argmax[None], g[None]
    if len(input_shape) != 4 or argmax.ndim != 4:
        raise ShapeError(f"input shape {input_shape} must be H x W x C or N x H x W x C")
    n, h, w, c = input_shape
    if argmax.shape[0] != n or argmax.shape[3] != c:
        raise ShapeError(f"index map {argmax.shape} inconsistent with input shape {input_shape}")
    if argmax.size and (argmax.min() < 0 or argmax.max() >= h * w):
        raise ShapeError(f"index map points outside the {h}x{w} input plane")
    flat = ((np.arange(n)[:, None, None, None] * (h * w) + argmax) * c
            + np.arange(c)[None, None, None, :])
    grad = np.bincount(flat.ravel(), weights=g.ravel(), minlength=n * h * w * c)
    grad = grad.astype(g.dtype, copy=False).reshape(n, h, w, c)
    return grad[0] if single else grad


# ---------------------------------------------------------------- ReLU

def relu(x) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, 0)


def relu_backward(x, grad_out) -> np.ndarray:
    x = np.asarray(x)
    g = np.asarray(grad_out)
    if x.shape != g.shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != input shape {x.shape}")
    return np.where(x > 0, g, 0).astype(g.dtype, copy=False)


# ---------------------------------------------------------------- inner product

def _check_ip(x, weights, bias):
    x = np.asarray(x)
    weights = as_tensor(weights, rank=2, name="weights")
    m, d = weights.shape
    if x.ndim not in (1, 2):
        raise ShapeError(f"inner product input must be a vector or a batch of vectors, got {x.shape}")
    if x.shape[-1] != d:
        raise ShapeError(f"input length {x.shape[-1]} != weight columns {d}")
    if bias is not None and np.shape(bias) != (m,):
        raise ShapeError(f"bias length {np.shape(bias)} != weight rows {m}")
    return x, weights


def inner_product_forward(x, weights, bias) -> np.ndarray:
    """``weights @ x + bias`` for a length-D vector or an N x D batch."""
    x, weights = _check_ip(x, weights, bias)
    return x @ weights.T + bias


def inner_product_backward(x, weights, grad_out):
    x, weights = _check_ip(x, weights, None)
    g = np.asarray(grad_out)
    if g.shape != x.shape[:-1] + (weights.shape[0],):
        raise ShapeError(f"upstream gradient shape {g.shape} does not match output")
    grad_x = g @ weights
    if x.ndim == 1:
        return grad_x, np.outer(g, x), g.copy()
    return grad_x, g.T @ x, g.sum(axis=0)


# ---------------------------------------------------------------- softmax loss

def softmax(logits) -> np.ndarray:
    z = np.asarray(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target):
    """Softmax probabilities, negative log-likelihood and its logit gradient.

    ``logits`` is a length-N vector (``target`` an int) or a B x N batch
    (``target`` a length-B int array); for a batch the loss and gradient are
    averaged over the rows.
    """
    z = np.asarray(logits)
    if z.ndim not in (1, 2):
        raise ShapeError(f"logits must be rank 1 or 2, got {z.shape}")
    n_cls = z.shape[-1]
    t = np.asarray(target)
    if t.shape != z.shape[:-1]:
        raise ShapeError(f"target shape {t.shape} does not match logits {z.shape}")
    if np.any(t < 0) or np.any(t >= n_cls):
        raise ValueError(f"class index out of range [0, {n_cls})")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    total = e.sum(axis=-1, keepdims=True)
    probs = e / total
    logp = shifted - np.log(total)
    onehot = np.zeros_like(probs)
    if z.ndim == 1:
        onehot[t] = 1
        return float(-logp[t]), probs, probs - onehot
    rows = np.arange(z.shape[0])
    onehot[rows, t] = 1
    loss = float(-logp[rows, t].mean())
    return loss, probs, (probs - onehot) / z.shape[0]


# ---------------------------------------------------------------- SGD

@dataclass
class SgdState:
    """Classical momentum with weight decay folded into the gradient."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")


def sgd_step(params: dict, grads: dict, state: SgdState) -> dict:
    """In-place update ``v = m*v - lr*(g + wd*p); p += v`` for every named parameter."""
    if params.keys() != grads.keys():
        raise ShapeError("parameter and gradient names differ")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"{name}: velocity shape {v.shape} != parameter shape {p.shape}")
        lr = p.dtype.type(state.learning_rate)
        v *= p.dtype.type(state.momentum)
        v -= lr * (g + p.dtype.type(state.weight_decay) * p)
        p += v
    return params

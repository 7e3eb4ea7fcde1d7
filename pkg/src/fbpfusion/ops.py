"""Differentiable operations on :class:`~fbpfusion.tensor.Tensor`.

Each op computes its forward result with numpy and registers a closure that
maps the output gradient to one gradient per input.  Only the operations the
emotion model needs are provided; there is no general broadcasting.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fbpfusion.errors import DimensionError
from fbpfusion.tensor import Tensor

L2_EPS = 1e-12

# LRN defaults follow AlexNet
LRN_SIZE = 5
LRN_K = 2.0
LRN_ALPHA = 1e-4
LRN_BETA = 0.75

SeedLike = Union[int, np.random.Generator, None]

_KINK_LOG: Optional[List[np.ndarray]] = None


@contextlib.contextmanager
def record_kinks() -> Iterator[List[np.ndarray]]:
    """Collect the branch pattern (ReLU masks, max-pool argmaxes) of ops run inside the block.

    Finite-difference checks use it to skip coordinates whose perturbation
    crosses a non-differentiable point.
    """
    global _KINK_LOG
    prev, _KINK_LOG = _KINK_LOG, []
    try:
        yield _KINK_LOG
    finally:
        _KINK_LOG = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise (Hadamard) product."""
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_rowwise(x: Tensor, b: Tensor) -> Tensor:
    """``x[i, :] + b`` for a 2-D ``x`` and a vector ``b`` (bias add)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_rowwise: cannot add bias {b.shape} to rows of {x.shape}")
    return Tensor._from_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_rowwise")


def add_channelwise(x: Tensor, b: Tensor) -> Tensor:
    """``x[c] + b[c]`` for a C x H x W map and a length-C bias."""
    if x.data.ndim != 3 or b.data.ndim != 1 or x.shape[0] != b.shape[0]:
        raise DimensionError(f"add_channelwise: bias {b.shape} does not match channels of {x.shape}")
    return Tensor._from_op(
        x.data + b.data[:, None, None], (x, b), lambda g: (g, g.sum(axis=(1, 2))), "add_channelwise"
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(mask)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return Tensor._from_op(y, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")
    return Tensor._from_op(x.data.T, (x,), lambda g: (g.T,), "transpose")


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Join 1-D tensors end to end."""
    for t in tensors:
        if t.data.ndim != 1:
            raise DimensionError(f"concat takes vectors, got shape {t.shape}")
    sizes = [t.shape[0] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return Tensor._from_op(
        np.concatenate([t.data for t in tensors]), tuple(tensors), lambda g: tuple(np.split(g, cuts)), "concat"
    )


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a one-element tensor."""
    shape = x.shape
    return Tensor._from_op(np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0], dtype=x.dtype),), "sum")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def vecmat(x: Tensor, w: Tensor) -> Tensor:
    """Row vector times matrix: ``x @ w`` for a length-m ``x`` and m x n ``w``."""
    if x.data.ndim != 1 or w.data.ndim != 2 or x.shape[0] != w.shape[0]:
        raise DimensionError(f"vecmat: cannot multiply vector {x.shape} by {w.shape}")
    xd, wd = x.data, w.data
    return Tensor._from_op(xd @ wd, (x, w), lambda g: (wd @ g, np.outer(xd, g)), "vecmat")


# ---------------------------------------------------------------- convolution & pooling


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a C_in x H x W map with C_out x C_in x kh x kw kernels."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d: expected CxHxW input and 4-D kernels, got {x.shape} and {kernels.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise DimensionError(f"conv2d: kernels {kernels.shape} expect {kc} channels, input {x.shape} has {c_in}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    ho, wo = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # (C_in, Ho, Wo, kh, kw) strided view of all patches
    patches = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = patches.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c_in * kh * kw)
    kmat = kernels.data.reshape(c_out, -1)
    out = (cols @ kmat.T).T.reshape(c_out, ho, wo)

    def _backward(g):
        gmat = g.reshape(c_out, ho * wo)
        gk = (gmat @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ gmat).reshape(c_in, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return Tensor._from_op(out, (x, kernels), _backward, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    """Per-window maximum; gradient goes to the first maximal entry in row-major order."""
    stride = k if stride is None else stride
    if x.data.ndim != 3:
        raise DimensionError(f"maxpool2d: expected CxHxW input, got {x.shape}")
    c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError(f"maxpool2d: window {k} exceeds input {h}x{w}")
    ho, wo = _out_size(h, k, stride, 0), _out_size(w, k, stride, 0)
    win = sliding_window_view(x.data, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    flat = win.reshape(c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if _KINK_LOG is not None:
        _KINK_LOG.append(arg)

    def _backward(g):
        gx = np.zeros_like(x.data)
        ci, oi, oj = np.indices((c, ho, wo))
        rows = oi * stride + arg // k
        cols = oj * stride + arg % k
        np.add.at(gx, (ci, rows, cols), g)
        return (gx,)

    return Tensor._from_op(out, (x,), _backward, "maxpool2d")


def _channel_window_sum(a: np.ndarray, n: int) -> np.ndarray:
    """Sum over channels c - n//2 .. c + n//2 (clipped) for each channel c."""
    half = n // 2
    c = a.shape[0]
    csum = np.concatenate([np.zeros((1,) + a.shape[1:], dtype=a.dtype), np.cumsum(a, axis=0)])
    lo = np.clip(np.arange(c) - half, 0, c)
    hi = np.clip(np.arange(c) + half + 1, 0, c)
    return csum[hi] - csum[lo]


def local_response_norm(
    x: Tensor, n: int = LRN_SIZE, k: float = LRN_K, alpha: float = LRN_ALPHA, beta: float = LRN_BETA
) -> Tensor:
    """Across-channel LRN: ``x_c / (k + alpha * sum_{c' near c} x_c'^2) ** beta``."""
    if x.data.ndim != 3:
        raise DimensionError(f"local_response_norm: expected CxHxW input, got {x.shape}")
    if n < 1 or n % 2 == 0 or n > 2 * x.shape[0] - 1:
        raise DimensionError(f"local_response_norm: size n={n} must be odd and <= 2C-1 for C={x.shape[0]}")
    xd = x.data
    denom = k + alpha * _channel_window_sum(xd * xd, n)
    scale_ = denom**-beta
    out = xd * scale_

    def _backward(g):
        t = g * xd * scale_ / denom
        return (g * scale_ - 2.0 * alpha * beta * xd * _channel_window_sum(t, n),)

    return Tensor._from_op(out, (x,), _backward, "lrn")


# ---------------------------------------------------------------- attention / fusion primitives


def scaled_softmax(e: Tensor, lam: float) -> Tensor:
    """``softmax(lam * e)`` over a vector; lam = 0 gives exactly uniform weights."""
    if e.data.ndim != 1 or e.shape[0] < 1:
        raise DimensionError(f"scaled_softmax needs a non-empty vector, got shape {e.shape}")
    if lam == 0.0:
        alpha = np.full(e.shape, 1.0 / e.shape[0], dtype=e.dtype)
    else:
        s = lam * e.data
        ex = np.exp(s - s.max())
        alpha = ex / ex.sum()

    def _backward(g):
        return (lam * alpha * (g - np.dot(g, alpha)),)

    return Tensor._from_op(alpha, (e,), _backward, "scaled_softmax")


def sum_pool_segments(x: Tensor, k: int) -> Tensor:
    """Sum over consecutive non-overlapping windows of length ``k``."""
    if x.data.ndim != 1:
        raise DimensionError(f"sum_pool_segments needs a vector, got shape {x.shape}")
    if k < 1 or x.shape[0] % k:
        raise DimensionError(f"sum_pool_segments: length {x.shape[0]} is not divisible by k={k}")
    return Tensor._from_op(
        x.data.reshape(-1, k).sum(axis=1), (x,), lambda g: (np.repeat(g, k),), "sum_pool_segments"
    )


def l2_normalize(z: Tensor, eps: float = L2_EPS) -> Tensor:
    """``z / ||z||``; vectors with norm <= eps pass through unchanged."""
    norm = float(np.linalg.norm(z.data))
    if norm <= eps:
        return Tensor._from_op(z.data.copy(), (z,), lambda g: (g,), "l2_normalize")
    y = z.data / norm
    return Tensor._from_op(y, (z,), lambda g: ((g - y * np.dot(y.ravel(), g.ravel())) / norm,), "l2_normalize")


def _rng(seed: SeedLike) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def dropout(x: Tensor, p: float, training: bool, rng: SeedLike = None) -> Tensor:
    """Inverted dropout; the identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (_rng(rng).random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- loss


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is B x K (a length-K vector is treated as B = 1).
    """
    x = logits if logits.data.ndim == 2 else reshape(logits, (1, -1))
    if x.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be B x K, got {logits.shape}")
    b, k = x.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != b:
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {b} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise IndexError(f"cross_entropy: labels {labels.tolist()} out of range [0, {k})")
    logp = log_softmax_np(x.data)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def _backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g[0] / b),)

    return Tensor._from_op(np.array([loss], dtype=x.dtype), (x,), _backward, "cross_entropy")

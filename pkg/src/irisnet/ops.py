"""Differentiable operations over :class:`~irisnet.tensor.Tensor`.

Convolutions use an im2col layout so the heavy lifting is a single GEMM per
call; scatter-style backward passes go through ``np.bincount`` which is much
faster than ``np.add.at``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Tensor, as_tensor, make_result

# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return make_result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, "mul", (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return make_result(x.data * c, "scale", (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    return make_result(x.data * x.data, "square", (x,), lambda g: (2.0 * x.data * g,))


def sqrt_abs(x: Tensor, eps: float = 1e-3) -> Tensor:
    """``sqrt(|x| + eps)``, used for the width/height terms of the box loss."""
    r = np.sqrt(np.abs(x.data) + DTYPE(eps))
    return make_result(r, "sqrt_abs", (x,), lambda g: (g * np.sign(x.data) / (2.0 * r),))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64), dtype=DTYPE)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(DTYPE),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(DTYPE),)

    return make_result(out, "sum", (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(out, "permute", (x,), lambda g: (g.transpose(inv),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    k = np.where(x.data > 0, DTYPE(1), DTYPE(slope))
    return make_result(x.data * k, "leaky_relu", (x,), lambda g: (g * k,))


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity (the same tensor object) outside training."""
    if not train or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    mask = (rng.random(x.shape, dtype=np.float32) >= p).astype(DTYPE) / DTYPE(1.0 - p)
    return make_result(x.data * mask, "dropout", (x,), lambda g: (g * mask,), mask=mask)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_result(out, "linear", inputs, bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col_t(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Column matrix laid out (C*kh*kw, N*Ho*Wo).

    Keeping output pixels on the fast axis makes the gather copy run along
    contiguous image rows, several times quicker than pixel-major columns.
    """
    n, c = xp.shape[:2]
    if kh == 1 and kw == 1:
        win = xp[:, :, ::stride, ::stride][:, :, :ho, :wo]
        return win.transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (O, C, kh, kw) kernel."""
    if x.ndim != 4:
        raise ValueError(f"conv2d: expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d: input channels {c} != weight channels {cw}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d: bias length {bias.shape} != output channels {o}")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride {stride} / pad {pad}")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wmat = weight.data.reshape(o, -1)
    out = wmat @ _im2col_t(xp, kh, kw, stride, ho, wo)  # (O, N*Ho*Wo)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ _im2col_t(xp, kh, kw, stride, ho, wo).T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return make_result(np.ascontiguousarray(out), "conv2d", inputs, bw)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


@dataclass
class PoolIndices:
    """Winning flat positions (into the H*W plane) for each pooled cell."""

    indices: np.ndarray  # int64, (N, C, Ho, Wo)
    input_hw: tuple
    kernel: int
    stride: int

    @property
    def output_hw(self) -> tuple:
        return self.indices.shape[2:]

    def window_violations(self) -> int:
        """Number of stored indices that fall outside their own window."""
        h, w = self.input_hw
        ho, wo = self.output_hw
        r, c = np.divmod(self.indices, w)
        r0 = (np.arange(ho) * self.stride)[:, None]
        c0 = (np.arange(wo) * self.stride)[None, :]
        bad = (r < r0) | (r >= r0 + self.kernel) | (c < c0) | (c >= c0 + self.kernel)
        bad |= (r >= h) | (c >= w) | (self.indices < 0)
        return int(bad.sum())


def pool_output_size(n: int, k: int, stride: int, ceil_mode: bool) -> int:
    if ceil_mode:
        out = -(-(n - k) // stride) + 1
        # the last window must start inside the input
        if (out - 1) * stride >= n:
            out -= 1
        return out
    return (n - k) // stride + 1


def _scatter_add(g: np.ndarray, idx: np.ndarray, plane: int) -> np.ndarray:
    """Sum ``g`` (N, C, M) into an (N, C, plane) array at ``idx`` (N, C, M)."""
    n, c = g.shape[:2]
    offs = (np.arange(n * c, dtype=np.int64) * plane).reshape(n, c, 1)
    flat = (idx.reshape(n, c, -1) + offs).ravel()
    out = np.bincount(flat, weights=g.reshape(-1).astype(np.float64), minlength=n * c * plane)
    return out.astype(DTYPE).reshape(n, c, plane)


def maxpool2d(x: Tensor, k: int = 2, stride: Optional[int] = None,
              ceil_mode: bool = False) -> tuple[Tensor, PoolIndices]:
    """Max pooling that also returns the argmax positions.

    Ties go to the first element of the window in row-major order.
    """
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ValueError(f"maxpool2d: invalid kernel {k} / stride {stride}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ValueError(f"maxpool2d: window {k} larger than input {h}x{w}")
    ho, wo = pool_output_size(h, k, stride, ceil_mode), pool_output_size(w, k, stride, ceil_mode)
    hp, wp = (ho - 1) * stride + k, (wo - 1) * stride + k
    xd = x.data
    if hp > h or wp > w:
        xd = np.pad(xd, ((0, 0), (0, 0), (0, max(0, hp - h)), (0, max(0, wp - w))),
                    constant_values=-np.inf)
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    dr, dc = np.divmod(arg, k)
    rows = dr + (np.arange(ho) * stride)[:, None]
    cols = dc + (np.arange(wo) * stride)[None, :]
    flat = (rows * w + cols).astype(np.int64)
    pi = PoolIndices(flat, (h, w), k, stride)

    def bw(g):
        return (_scatter_add(g, flat, h * w).reshape(x.shape),)

    return make_result(np.ascontiguousarray(out), "maxpool2d", (x,), bw, indices=pi), pi


def unpool2d(x: Tensor, pool: PoolIndices) -> Tensor:
    """Scatter pooled values back to their recorded argmax positions."""
    n, c, ho, wo = x.shape
    if pool.indices.shape != x.shape:
        raise ValueError(
            f"unpool2d: input shape {x.shape} != pooled shape {pool.indices.shape}")
    h, w = pool.input_hw
    idx = pool.indices
    if idx.size and (idx.min() < 0 or idx.max() >= h * w):
        raise ValueError("unpool2d: pool index outside the recorded output extent")
    out = _scatter_add(x.data, idx, h * w).reshape(n, c, h, w)
    flat_idx = idx.reshape(n, c, -1)

    def bw(g):
        gi = np.take_along_axis(g.reshape(n, c, h * w), flat_idx, axis=2)
        return (gi.reshape(x.shape),)

    return make_result(out, "unpool2d", (x,), bw)


def avgpool2d(x: Tensor, k: int, stride: Optional[int] = None) -> Tensor:
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ValueError(f"avgpool2d: invalid kernel {k} / stride {stride}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ValueError(f"avgpool2d: window {k} larger than input {h}x{w}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = win.mean(axis=(-2, -1), dtype=np.float64).astype(DTYPE)

    def bw(g):
        gx = np.zeros(x.shape, dtype=DTYPE)
        gk = g / DTYPE(k * k)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gk
        return (gx,)

    return make_result(out, "avgpool2d", (x,), bw)


def global_avgpool(x: Tensor) -> Tensor:
    """Average over the full spatial extent, returning (N, C)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(DTYPE)

    def bw(g):
        return (np.broadcast_to((g / DTYPE(h * w))[:, :, None, None], x.shape).astype(DTYPE),)

    return make_result(out, "global_avgpool", (x,), bw)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Running statistics; ``None`` until the first training batch."""

    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: gamma/beta must have length {c}")
    gm = gamma.data[None, :, None, None]
    if train:
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        unbiased = var * m / max(m - 1, 1)
        if state.running_mean is None:
            state.running_mean = mu.astype(DTYPE)
            state.running_var = unbiased.astype(DTYPE)
        else:
            state.running_mean = ((1 - momentum) * state.running_mean + momentum * mu).astype(DTYPE)
            state.running_var = ((1 - momentum) * state.running_var + momentum * unbiased).astype(DTYPE)
        inv = (1.0 / np.sqrt(var + eps)).astype(DTYPE)[None, :, None, None]
        xhat = (x.data - mu.astype(DTYPE)[None, :, None, None]) * inv
        out = xhat * gm + beta.data[None, :, None, None]

        def bw(g):
            gb = g.sum(axis=(0, 2, 3))
            gg = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gm
            gx = inv / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
            return gx.astype(DTYPE), gg, gb

        return make_result(out.astype(DTYPE), "batchnorm2d", (x, gamma, beta), bw)

    if not state.initialized:
        raise RuntimeError("batchnorm2d: inference requested before running statistics exist")
    inv = (1.0 / np.sqrt(state.running_var.astype(np.float64) + eps)).astype(DTYPE)[None, :, None, None]
    xhat = (x.data - state.running_mean[None, :, None, None]) * inv
    out = xhat * gm + beta.data[None, :, None, None]

    def bw_inf(g):
        return g * gm * inv, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_result(out.astype(DTYPE), "batchnorm2d", (x, gamma, beta), bw_inf)


# ---------------------------------------------------------------------------
# classification losses
# ---------------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under row-wise softmax."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"softmax_xent: expected (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"softmax_xent: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_xent: labels must lie in [0, {c})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logz - z[rows, labels])

    def bw(g):
        p = np.exp(z - logz[:, None])
        p[rows, labels] -= 1.0
        return ((p * (float(g) / n)).astype(DTYPE),)

    return make_result(np.asarray(loss, dtype=DTYPE), "softmax_xent", (logits,), bw)


def pixel_xent(logits: Tensor, labels) -> Tensor:
    """Cross-entropy averaged over every pixel of an NCHW logit map."""
    n, c, h, w = logits.shape
    flat = reshape(permute(logits, (0, 2, 3, 1)), (n * h * w, c))
    return softmax_xent(flat, np.asarray(labels).reshape(-1))


def total_loss(main: Tensor, aux: Sequence[Tensor], alpha: float) -> Tensor:
    """Main loss plus ``alpha`` times the sum of auxiliary losses."""
    if alpha < 0:
        raise ValueError("aux weight must be non-negative")
    out = main
    for a in aux:
        out = add(out, scale(a, alpha))
    return out


__all__ = [
    "PoolIndices", "BatchNormState", "add", "sub", "mul", "scale", "square", "sqrt_abs",
    "sum", "mean", "reshape", "flatten", "permute", "relu", "leaky_relu", "dropout",
    "linear", "conv2d", "maxpool2d", "unpool2d", "avgpool2d", "global_avgpool",
    "batchnorm2d", "softmax", "softmax_xent", "pixel_xent", "total_loss",
    "conv_output_size", "pool_output_size",
]

"""Spatial transformer: localisation net, affine grid generator, bilinear sampler.

Coordinates are normalised to [-1, 1] with pixel centres on an inclusive
linspace, so the first and last pixel sit exactly at -1 and +1. Samples that
land outside the input read zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn, ops
from .tensor import DTYPE, Tensor, as_tensor, make_result

IDENTITY_THETA = np.array([1, 0, 0, 0, 1, 0], dtype=DTYPE)


def _axis(n: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)


def base_grid(h: int, w: int) -> np.ndarray:
    """(H*W, 3) rows of ``[x_out, y_out, 1]`` in row-major pixel order."""
    ys, xs = np.meshgrid(_axis(h), _axis(w), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)], axis=1)


def affine_grid(theta, h_out: int, w_out: int) -> Tensor:
    """Map every normalised output coordinate through the 2x3 matrix ``theta``.

    ``theta`` is (N, 6) or (6,), ordered (t11, t12, t13, t21, t22, t23).
    Returns an (N, H_out, W_out, 2) grid holding (x_in, y_in).
    """
    if h_out < 1 or w_out < 1:
        raise ValueError("affine_grid: output extents must be >= 1")
    theta = as_tensor(theta)
    squeeze = theta.ndim == 1
    t = theta.data.reshape(-1, 6)
    if theta.ndim not in (1, 2) or theta.shape[-1] != 6:
        raise ValueError(f"affine_grid: theta must have 6 values per sample, got {theta.shape}")
    base = base_grid(h_out, w_out)
    a = t.reshape(-1, 2, 3).astype(np.float64)
    grid = np.einsum("pk,njk->npj", base, a).reshape(-1, h_out, w_out, 2).astype(DTYPE)

    def bw(g):
        ga = np.einsum("npj,pk->njk", g.reshape(len(t), -1, 2).astype(np.float64), base)
        return (ga.reshape(theta.shape).astype(DTYPE),)

    out = make_result(grid, "affine_grid", (theta,), bw)
    return ops.reshape(out, (h_out, w_out, 2)) if squeeze else out


def bilinear_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Sample NCHW ``x`` at (N, Ho, Wo, 2) normalised coordinates.

    One grid is shared by every channel of a sample. Differentiable in both
    the input values and the grid coordinates.
    """
    x, grid = as_tensor(x), as_tensor(grid)
    n, c, h, w = x.shape
    if grid.ndim == 3:
        grid = ops.reshape(grid, (1,) + grid.shape)
    if grid.shape[0] != n or grid.shape[-1] != 2:
        raise ValueError(f"bilinear_sample: grid {grid.shape} incompatible with input {x.shape}")
    ho, wo = grid.shape[1:3]
    gd = grid.data.reshape(n, ho * wo, 2).astype(np.float64)
    px = (gd[..., 0] + 1.0) * 0.5 * (w - 1)
    py = (gd[..., 1] + 1.0) * 0.5 * (h - 1)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = (px - x0).astype(DTYPE)
    fy = (py - y0).astype(DTYPE)

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.where(valid, yi * w + xi, 0)
            wx = fx if dx else 1 - fx
            wy = fy if dy else 1 - fy
            corners.append((idx, valid.astype(DTYPE), wx, wy))

    flat = x.data.reshape(n, c, h * w)
    vals = []
    out = np.zeros((n, c, ho * wo), dtype=DTYPE)
    for idx, valid, wx, wy in corners:
        v = np.take_along_axis(flat, np.broadcast_to(idx[:, None, :], (n, c, ho * wo)), axis=2)
        v = v * valid[:, None, :]
        vals.append(v)
        out += v * (wx * wy)[:, None, :]

    def bw(g):
        g = g.reshape(n, c, ho * wo)
        gx = None
        if x.requires_grad:
            gx = np.zeros((n, c, h * w), dtype=DTYPE)
            for idx, valid, wx, wy in corners:
                contrib = g * (wx * wy * valid)[:, None, :]
                gx += ops._scatter_add(contrib, np.broadcast_to(idx[:, None, :], contrib.shape), h * w)
            gx = gx.reshape(x.shape)
        ggrid = None
        if grid.requires_grad:
            v00, v01, v10, v11 = vals
            dpx = ((v01 - v00) * (1 - fy)[:, None, :] + (v11 - v10) * fy[:, None, :])
            dpy = ((v10 - v00) * (1 - fx)[:, None, :] + (v11 - v01) * fx[:, None, :])
            gpx = (g * dpx).sum(axis=1) * DTYPE(0.5 * (w - 1))
            gpy = (g * dpy).sum(axis=1) * DTYPE(0.5 * (h - 1))
            ggrid = np.stack([gpx, gpy], axis=-1).reshape(grid.shape).astype(DTYPE)
        return gx, ggrid

    return make_result(out.reshape(n, c, ho, wo), "bilinear_sample", (x, grid), bw)


@dataclass
class STModuleConfig:
    """Localisation-net layout for one insertion point.

    ``layers`` lists (kind, arg) pairs: ("conv", (out_ch, k, stride)) or
    ("pool", k). A final linear layer emitting 6 values is always appended.
    """

    in_channels: int
    input_hw: tuple
    layers: list = field(default_factory=list)
    label: str = "st"

    @classmethod
    def default(cls, in_channels: int, input_hw: tuple, width: int = 8,
                label: str = "st") -> "STModuleConfig":
        h = input_hw[0]
        first_stride = 2 if h >= 32 else 1
        return cls(in_channels, tuple(input_hw),
                   [("conv", (width, 5, first_stride)), ("pool", 2),
                    ("conv", (width, 3, 2 if h >= 64 else 1))], label)


class SpatialTransformer(nn.Module):
    """Predicts an affine warp of its input and applies it.

    The localisation net's final linear layer starts with zero weights and the
    identity bias, so a fresh module passes its input through unchanged.
    """

    def __init__(self, cfg: STModuleConfig, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.cfg = cfg
        layers: list[nn.Module] = []
        ch, (h, w) = cfg.in_channels, cfg.input_hw
        for kind, arg in cfg.layers:
            if kind == "conv":
                cout, k, s = arg
                layers += [nn.Conv2d(ch, cout, k, s, k // 2, rng=rng), nn.ReLU()]
                h = ops.conv_output_size(h, k, s, k // 2)
                w = ops.conv_output_size(w, k, s, k // 2)
                ch = cout
            elif kind == "pool":
                layers.append(nn.MaxPool2d(arg))
                h, w = ops.pool_output_size(h, arg, arg, False), ops.pool_output_size(w, arg, arg, False)
            else:
                raise ValueError(f"unknown localisation layer kind {kind!r}")
            if h < 1 or w < 1:
                raise ValueError(f"{cfg.label}: localisation net collapses the input")
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(ch * h * w, 6, rng=rng)
        self.head.weight.data[:] = 0
        self.head.bias.data[:] = IDENTITY_THETA

    def theta(self, x: Tensor) -> Tensor:
        t = self.head(ops.flatten(self.features(x)))
        if t.shape[-1] != 6:
            raise ValueError(f"localisation net must emit 6 values, got {t.shape[-1]}")
        return t

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != (self.cfg.in_channels,) + tuple(self.cfg.input_hw):
            raise ValueError(
                f"{self.cfg.label}: expected input (C,H,W)="
                f"{(self.cfg.in_channels,) + tuple(self.cfg.input_hw)}, got {x.shape[1:]}")
        h, w = x.shape[2:]
        return bilinear_sample(x, affine_grid(self.theta(x), h, w))


def st_apply(x: Tensor, module: SpatialTransformer) -> Tensor:
    return module(x)

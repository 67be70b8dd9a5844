"""Boxes, overlap and image resampling helpers shared by every stage."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

CLASSES = ("iris", "pupil")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in image-normalised coordinates (centre, size)."""

    cls: str
    cx: float
    cy: float
    w: float
    h: float
    confidence: float = 1.0

    def __post_init__(self):
        if self.cls not in CLASSES:
            raise ValueError(f"unknown box class {self.cls!r}")

    @property
    def class_id(self) -> int:
        return CLASSES.index(self.cls)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def to_pixels(self, width: int, height: int) -> tuple[float, float, float, float]:
        x0, y0, x1, y1 = self.corners()
        return x0 * width, y0 * height, x1 * width, y1 * height

    def is_valid(self) -> bool:
        return 0 <= self.cx <= 1 and 0 <= self.cy <= 1 and 0 < self.w <= 1 and 0 < self.h <= 1

    def inside_frame(self) -> bool:
        x0, y0, x1, y1 = self.corners()
        return x0 >= 0 and y0 >= 0 and x1 <= 1 and y1 <= 1

    def contains(self, other: "BBox", tol: float = 1e-9) -> bool:
        a, b = self.corners(), other.corners()
        return (b[0] >= a[0] - tol and b[1] >= a[1] - tol
                and b[2] <= a[2] + tol and b[3] <= a[3] + tol)

    def with_confidence(self, c: float) -> "BBox":
        return replace(self, confidence=float(c))


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return 0.0 if union <= 0 else inter / union


def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (C, H, W) at pixel-index coordinates, clamping to the border."""
    h, w = img.shape[1:]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def crop_resize(img: np.ndarray, box_px: tuple, out_h: int, out_w: int,
                nearest: bool = False) -> np.ndarray:
    """Resample the pixel rectangle ``(x0, y0, x1, y1)`` to ``out_h x out_w``.

    ``img`` is (C, H, W) or (H, W). Pixel centres sit at half-integer
    positions in box coordinates; reads outside the image clamp to the edge.
    """
    squeeze = img.ndim == 2
    a = img[None] if squeeze else img
    x0, y0, x1, y1 = box_px
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"degenerate crop box {box_px}")
    ys = y0 + (np.arange(out_h) + 0.5) * (y1 - y0) / out_h - 0.5
    xs = x0 + (np.arange(out_w) + 0.5) * (x1 - x0) / out_w - 0.5
    if nearest:
        h, w = a.shape[1:]
        yi = np.clip(np.round(ys).astype(int), 0, h - 1)
        xi = np.clip(np.round(xs).astype(int), 0, w - 1)
        out = a[:, yi][:, :, xi]
    else:
        out = _sample_bilinear(a.astype(np.float64), ys, xs).astype(img.dtype)
    return out[0] if squeeze else out


def resize(img: np.ndarray, out_h: int, out_w: int, nearest: bool = False) -> np.ndarray:
    h, w = img.shape[-2:]
    return crop_resize(img, (0, 0, w, h), out_h, out_w, nearest)


def scale_about_center(img: np.ndarray, factor: float, nearest: bool = False,
                       fill=None) -> np.ndarray:
    """Zoom by ``factor`` keeping the image centre fixed; output size unchanged.

    With ``fill`` set, reads outside the source take that value instead of the
    nearest edge pixel.
    """
    h, w = img.shape[-2:]
    cx, cy = w / 2, h / 2
    half_w, half_h = w / (2 * factor), h / (2 * factor)
    box = (cx - half_w, cy - half_h, cx + half_w, cy + half_h)
    out = crop_resize(img, box, h, w, nearest)
    if fill is not None:
        ys = box[1] + (np.arange(h) + 0.5) * (2 * half_h) / h
        xs = box[0] + (np.arange(w) + 0.5) * (2 * half_w) / w
        outside = ((ys < 0) | (ys > h))[:, None] | ((xs < 0) | (xs > w))[None, :]
        out = np.where(outside, fill, out).astype(img.dtype)
    return out

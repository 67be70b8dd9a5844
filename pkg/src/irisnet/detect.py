"""Grid-regression detector for the iris and pupil boxes.

The image is split into ``W x W`` cells. Each cell predicts ``K`` boxes of
five numbers ``(x, y, w, h, conf)`` plus ``N`` class scores shared by the
cell: ``x, y`` are offsets inside the cell, ``w, h`` are relative to the
image. The iris and pupil are concentric, so both centres normally land in
the same cell; with ``K >= N`` box slot ``k`` is reserved for class ``k`` and
the class scores are multi-hot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import nn, ops
from .geometry import CLASSES, BBox, crop_resize
from .tensor import Tensor, no_grad
from .train import History, TrainRecipe, fit

# (name, kind, out channels, kernel, stride); pad is k // 2 for every conv
DETECTOR_LAYERS = (
    ("CONV1", "conv", 64, 7, 2),
    ("POOL1", "pool", None, 2, 2),
    ("CONV2", "conv", 192, 3, 1),
    ("POOL2", "pool", None, 2, 2),
    ("CONV3", "conv", 128, 1, 1),
    ("CONV4", "conv", 256, 3, 1),
    ("CONV5", "conv", 256, 1, 1),
    ("CONV6", "conv", 512, 3, 1),
    ("POOL3", "pool", None, 2, 2),
    ("CONV7", "conv", 256, 1, 1),
    ("CONV8", "conv", 512, 3, 1),
    ("CONV9", "conv", 256, 1, 1),
    ("CONV10", "conv", 512, 3, 1),
    ("CONV11", "conv", 512, 1, 1),
    ("CONV12", "conv", 1024, 3, 1),
    ("POOL4", "pool", None, 2, 2),
    ("CONV13", "conv", 512, 1, 1),
    ("CONV14", "conv", 1024, 3, 1),
    ("CONV15", "conv", 1024, 3, 1),
    ("CONV16", "conv", 1024, 3, 2),
    ("CONV17", "conv", 1024, 3, 1),
    ("CONV18", "conv", 1024, 3, 1),
)
FC_WIDTHS = (1024, 4096)


@dataclass
class DetectorConfig:
    grid: int = 11
    boxes: int = 2
    classes: int = 2
    input_size: int = 448
    in_channels: int = 3
    width: float = 1.0
    fc_width: Optional[float] = None  # scale for FC1/FC2; defaults to ``width``
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    dropout: float = 0.5
    layers: tuple = DETECTOR_LAYERS
    fc_widths: tuple = FC_WIDTHS

    @property
    def cell_size(self) -> int:
        return 5 * self.boxes + self.classes

    @property
    def output_length(self) -> int:
        return self.grid * self.grid * self.cell_size

    @property
    def slots_bound(self) -> bool:
        return self.boxes >= self.classes

    def channels(self, c: int) -> int:
        return max(1, int(round(c * self.width)))

    @classmethod
    def desk(cls, **kw) -> "DetectorConfig":
        # dropout 0.5 on the narrow desk-scale FC layers leaves the box sizes
        # regressed toward the mean; 0.1 trains in a fraction of the epochs
        base = dict(grid=7, boxes=2, classes=2, input_size=96, in_channels=1, width=1 / 16,
                    fc_width=0.25, dropout=0.1)
        base.update(kw)
        return cls(**base)


def layer_shapes(cfg: DetectorConfig) -> list[tuple[str, tuple]]:
    """Output (H, W, C) of every Table-3 row for ``cfg``, without building weights."""
    if cfg.width <= 0:
        raise ValueError("width scale must be positive")
    h = w = cfg.input_size
    c = cfg.in_channels
    out = []
    for name, kind, cout, k, s in cfg.layers:
        if kind == "conv":
            h, w = ops.conv_output_size(h, k, s, k // 2), ops.conv_output_size(w, k, s, k // 2)
            c = cfg.channels(cout)
        else:
            h, w = ops.pool_output_size(h, k, s, False), ops.pool_output_size(w, k, s, False)
        if h < 1 or w < 1:
            raise ValueError(f"{name}: input of {cfg.input_size}px shrinks to {h}x{w}")
        out.append((name, (h, w, c)))
    fs = cfg.width if cfg.fc_width is None else cfg.fc_width
    fc = [max(1, int(round(f * fs))) for f in cfg.fc_widths]
    out += [("FC1", (fc[0],)), ("FC2", (fc[1],)), ("FC3", (cfg.output_length,))]
    return out


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        shapes = dict(layer_shapes(cfg))
        layers = []
        c = cfg.in_channels
        self.names = []
        for name, kind, cout, k, s in cfg.layers:
            if kind == "conv":
                co = cfg.channels(cout)
                layers += [nn.Conv2d(c, co, k, s, k // 2, rng), nn.LeakyReLU(0.1)]
                self.names += [name, name + "_act"]
                c = co
            else:
                layers.append(nn.MaxPool2d(k, s))
                self.names.append(name)
        self.features = nn.Sequential(*layers)
        h, w, c = shapes[cfg.layers[-1][0]]
        fc1, fc2 = shapes["FC1"][0], shapes["FC2"][0]
        drop_rng = np.random.default_rng(rng.integers(2**63))
        self.head = nn.Sequential(
            nn.Linear(h * w * c, fc1, rng), nn.LeakyReLU(0.1), nn.Dropout(cfg.dropout, drop_rng),
            nn.Linear(fc1, fc2, rng), nn.LeakyReLU(0.1), nn.Dropout(cfg.dropout, drop_rng),
            nn.Linear(fc2, cfg.output_length, rng),
        )
        # a small final layer keeps early predictions near zero instead of far out
        self.head[-1].weight.data *= 0.1

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
            raise ValueError(f"detector expects (N, {cfg.in_channels}, {cfg.input_size}, "
                             f"{cfg.input_size}), got {x.shape}")
        flat = self.head(self.features(x))
        return ops.reshape(flat, (x.shape[0], cfg.grid, cfg.grid, cfg.cell_size))


def build_detector(cfg: DetectorConfig, seed: int = 0) -> Detector:
    return Detector(cfg, np.random.default_rng([seed, 3]))


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------


def responsible_cell(box: BBox, grid: int) -> tuple[int, int]:
    """(row, col) of the cell containing the box centre."""
    return min(int(math.floor(box.cy * grid)), grid - 1), min(int(math.floor(box.cx * grid)), grid - 1)


def encode_target(boxes: Sequence[BBox], cfg: DetectorConfig) -> np.ndarray:
    g = cfg.grid
    t = np.zeros((g, g, cfg.cell_size), np.float32)
    seen = set()
    used = set()
    for b in boxes:
        if not (0 <= b.cx <= 1 and 0 <= b.cy <= 1):
            raise ValueError(f"{b.cls} box centre ({b.cx}, {b.cy}) outside the image")
        if b.class_id >= cfg.classes:
            raise ValueError(f"class {b.cls} not in a {cfg.classes}-class detector")
        if b.cls in seen:
            raise ValueError(f"class {b.cls} appears more than once")
        seen.add(b.cls)
        row, col = responsible_cell(b, g)
        if cfg.slots_bound:
            slot = b.class_id
        else:
            slot = next((k for k in range(cfg.boxes) if (row, col, k) not in used), None)
            if slot is None:
                raise ValueError(f"cell ({row}, {col}) has no free box slot for {b.cls}")
        used.add((row, col, slot))
        t[row, col, 5 * slot:5 * slot + 5] = (b.cx * g - col, b.cy * g - row, b.w, b.h, 1.0)
        t[row, col, 5 * cfg.boxes + b.class_id] = 1.0
    return t


def decode_detections(grid: np.ndarray, cfg: DetectorConfig,
                      conf_threshold: float = 0.0) -> dict[str, Optional[BBox]]:
    """Best box per class by ``confidence x class score`` over all cells and slots."""
    grid = np.asarray(grid)
    g, kb, nc = cfg.grid, cfg.boxes, cfg.classes
    if grid.shape != (g, g, cfg.cell_size):
        grid = grid.reshape(g, g, cfg.cell_size)
    boxes = grid[..., :5 * kb].reshape(g, g, kb, 5)
    scores = boxes[..., 4:5] * grid[..., None, 5 * kb:]  # (g, g, K, N)
    if cfg.slots_bound:
        eligible = np.zeros((kb, nc), bool)
        eligible[np.arange(nc), np.arange(nc)] = True
        scores = np.where(eligible, scores, -np.inf)
    out = {}
    for c in range(nc):
        s = scores[..., c]
        flat = int(np.argmax(s))
        row, col, k = np.unravel_index(flat, s.shape)
        best = float(s[row, col, k])
        if not best >= conf_threshold:
            out[CLASSES[c]] = None
            continue
        x, y, w, h, _ = boxes[row, col, k].astype(np.float64)
        out[CLASSES[c]] = BBox(CLASSES[c],
                               float(np.clip((col + x) / g, 0, 1)), float(np.clip((row + y) / g, 0, 1)),
                               float(np.clip(abs(w), 1e-6, 1)), float(np.clip(abs(h), 1e-6, 1)),
                               confidence=float(np.clip(best, 0, 1)))
    return out


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def _loss_layout(target: np.ndarray, cfg: DetectorConfig):
    kb = cfg.boxes
    resp = target[..., 4:5 * kb:5]  # (..., K) responsibility
    obj_cell = resp.max(axis=-1, keepdims=True)
    weight = np.zeros_like(target)
    for k in range(kb):
        r = resp[..., k:k + 1]
        weight[..., 5 * k:5 * k + 4] = cfg.lambda_coord * r
        weight[..., 5 * k + 4:5 * k + 5] = r + cfg.lambda_noobj * (1 - r)
    weight[..., 5 * kb:] = obj_cell
    wh = np.zeros(target.shape[-1], np.float32)
    for k in range(kb):
        wh[5 * k + 2:5 * k + 4] = 1
    return weight.astype(np.float32), wh


def detection_loss(pred: Tensor, target: np.ndarray, cfg: DetectorConfig) -> Tensor:
    """Sum-squared grid loss, averaged over the batch.

    Width and height enter through ``sqrt(|v| + 1e-3)`` so small boxes are not
    swamped by large ones and the gradient stays finite at zero.
    """
    target = np.asarray(target, np.float32)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} vs target {target.shape}")
    weight, wh = _loss_layout(target, cfg)
    t = np.where(wh > 0, np.sqrt(np.abs(target) + 1e-3), target).astype(np.float32)
    p = ops.add(ops.mul(pred, 1 - wh), ops.mul(ops.sqrt_abs(pred, 1e-3), wh))
    sq = ops.mul(ops.square(ops.sub(p, t)), weight)
    n = pred.shape[0] if pred.ndim == 4 else 1
    return ops.scale(ops.sum(sq), 1.0 / n)


# ---------------------------------------------------------------------------
# box-only masking
# ---------------------------------------------------------------------------


def box_keep_mask(h: int, w: int, iris_box: BBox, pupil_box: BBox) -> np.ndarray:
    """Pixels kept by box masking: inside the iris box and outside the pupil disc."""
    x0, y0, x1, y1 = iris_box.to_pixels(w, h)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise ValueError("degenerate iris box")
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    inside = (xx >= x0) & (xx <= x1) & (yy >= y0) & (yy <= y1)
    px0, py0, px1, py1 = pupil_box.to_pixels(w, h)
    radius = ((px1 - px0) + (py1 - py0)) / 4  # diameter = (w + h) / 2
    pcx, pcy = (px0 + px1) / 2, (py0 + py1) / 2
    disc = np.hypot(xx - pcx, yy - pcy) <= radius
    return inside & ~disc


def mask_from_boxes(image: np.ndarray, iris_box: BBox, pupil_box: BBox,
                    out_size: int = 100) -> np.ndarray:
    """Zero everything but the iris-box area minus the pupil disc, crop, resize."""
    img = np.asarray(image, np.float32)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    h, w = img.shape[1:]
    keep = box_keep_mask(h, w, iris_box, pupil_box)
    masked = img * keep
    out = crop_resize(masked, iris_box.to_pixels(w, h), out_size, out_size)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------


@dataclass
class DetectorRecipe(TrainRecipe):
    lr: float = 0.001
    epochs: int = 40
    batch_size: int = 32
    clip_norm: Optional[float] = 10.0
    augment: bool = True

    @classmethod
    def desk(cls, **kw) -> "DetectorRecipe":
        base = dict(lr=0.005, epochs=15, batch_size=16)
        base.update(kw)
        return cls(**base)


def detector_input(samples, cfg: DetectorConfig, channel_means) -> np.ndarray:
    from .synth import preprocess
    size = (cfg.input_size, cfg.input_size)
    return np.stack([preprocess(s.image, channel_means, size) for s in samples])


def channel_means(samples) -> np.ndarray:
    return np.mean([s.image.mean(axis=(1, 2)) for s in samples], axis=0).astype(np.float32)


def train_detector(samples, cfg: DetectorConfig, recipe: DetectorRecipe, seed: int = 0,
                   on_epoch=None) -> tuple[Detector, np.ndarray, History]:
    from .synth import augment
    if recipe.augment:
        samples = [v for s in samples for v in augment(s, "detector")]
    means = channel_means(samples)
    x = detector_input(samples, cfg, means)
    y = np.stack([encode_target(s.boxes(), cfg) for s in samples])
    model = build_detector(cfg, seed)
    hist = fit(model, x, y, lambda m, xb, yb: detection_loss(m(xb), yb, cfg),
               replace(recipe, seed=seed), on_epoch=on_epoch)
    return model, means, hist


def detect(model: Detector, images: np.ndarray, channel_means, conf_threshold: float = 0.0,
           batch: int = 64) -> list[dict]:
    """Best iris and pupil box per image; ``images`` is (N, C, H, W) in [0, 1]."""
    from .synth import preprocess
    cfg = model.cfg
    size = (cfg.input_size, cfg.input_size)
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            xb = np.stack([preprocess(im, channel_means, size) for im in images[i:i + batch]])
            pred = model(Tensor(xb)).data
            out += [decode_detections(p, cfg, conf_threshold) for p in pred]
    return out

"""Encoder-decoder segmenter that labels ROI pixels as background, iris or pupil.

Each 7x7 convolution is followed by batch norm and ReLU. The encoder's three
ceil-mode max-pools keep their argmax positions; the decoder unpools with
them. Where a decoder stage arrives with more channels than the encoder map
it unpools into, a linear 1x1 projection matches the channel count first.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import nn, ops
from .tensor import Tensor, no_grad
from .train import History, TrainRecipe, fit

N_CLASSES = 3
ROI_SIZE = 100
ENCODER = (64, 96, 128, 128)

# rows of the segmentation table: name -> (H, W, C) at full width on a 100x100 ROI
SEGNET_SHAPES = (
    ("CONV1", (100, 100, 64)), ("POOL1", (50, 50, 64)), ("CONV2", (50, 50, 96)),
    ("POOL2", (25, 25, 96)), ("CONV3", (25, 25, 128)), ("CONV4", (25, 25, 128)),
    ("POOL3", (13, 13, 128)), ("UPSAMPLE3", (25, 25, 128)), ("CONV4_DECODE", (25, 25, 128)),
    ("CONV3_DECODE", (25, 25, 128)), ("UPSAMPLE2", (50, 50, 96)), ("CONV2_DECODE", (50, 50, 96)),
    ("UPSAMPLE1", (100, 100, 64)), ("CONV1_DECODE", (100, 100, 64)), ("CLASSIFIER", (100, 100, 3)),
)


class ConvBNReLU(nn.Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, k: int = 7):
        self.conv = nn.Conv2d(cin, cout, k, 1, k // 2, rng)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class SegNet(nn.Module):
    def __init__(self, width: float = 1.0, in_channels: int = 1, seed: int = 0):
        if width <= 0:
            raise ValueError("width scale must be positive")
        rng = np.random.default_rng([seed, 5])
        self.width, self.in_channels = width, in_channels
        c1, c2, c3, c4 = (max(1, int(round(c * width))) for c in ENCODER)
        self.channels = (c1, c2, c3, c4)
        self.conv1 = ConvBNReLU(in_channels, c1, rng)
        self.conv2 = ConvBNReLU(c1, c2, rng)
        self.conv3 = ConvBNReLU(c2, c3, rng)
        self.conv4 = ConvBNReLU(c3, c4, rng)
        self.conv4_dec = ConvBNReLU(c4, c3, rng)
        self.conv3_dec = ConvBNReLU(c3, c3, rng)
        self.proj2 = nn.Conv2d(c3, c2, 1, rng=rng) if c3 != c2 else None
        self.conv2_dec = ConvBNReLU(c2, c2, rng)
        self.proj1 = nn.Conv2d(c2, c1, 1, rng=rng) if c2 != c1 else None
        self.conv1_dec = ConvBNReLU(c1, c1, rng)
        self.classifier = nn.Conv2d(c1, N_CLASSES, 1, rng=rng)
        if c4 != c3:
            raise ValueError(f"POOL3 carries {c4} channels but UPSAMPLE3 feeds a {c3}-channel decoder")
        self.trace: Optional[list] = None

    def _rec(self, name: str, t: Tensor, **extra) -> Tensor:
        if self.trace is not None:
            self.trace.append((name, t, extra))
        return t

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"segmenter expects (N, {self.in_channels}, H, W), got {x.shape}")
        rec = self._rec
        e1 = rec("CONV1", self.conv1(x))
        p1, i1 = ops.maxpool2d(e1, 2, 2, ceil_mode=True)
        rec("POOL1", p1, indices=i1)
        e2 = rec("CONV2", self.conv2(p1))
        p2, i2 = ops.maxpool2d(e2, 2, 2, ceil_mode=True)
        rec("POOL2", p2, indices=i2)
        e3 = rec("CONV3", self.conv3(p2))
        e4 = rec("CONV4", self.conv4(e3))
        p3, i3 = ops.maxpool2d(e4, 2, 2, ceil_mode=True)
        rec("POOL3", p3, indices=i3)
        d = rec("UPSAMPLE3", ops.unpool2d(p3, i3), indices=i3)
        d = rec("CONV4_DECODE", self.conv4_dec(d))
        d = rec("CONV3_DECODE", self.conv3_dec(d))
        if self.proj2 is not None:
            d = self.proj2(d)
        d = rec("UPSAMPLE2", ops.unpool2d(d, i2), indices=i2)
        d = rec("CONV2_DECODE", self.conv2_dec(d))
        if self.proj1 is not None:
            d = self.proj1(d)
        d = rec("UPSAMPLE1", ops.unpool2d(d, i1), indices=i1)
        d = rec("CONV1_DECODE", self.conv1_dec(d))
        return rec("CLASSIFIER", self.classifier(d))

    def layer_shapes(self, hw: int = ROI_SIZE) -> list[tuple[str, tuple]]:
        """Run one (train-mode) pass on zeros and report every row's (H, W, C)."""
        was = self.training
        self.trace = []
        try:
            with no_grad():
                self.train()
                self(Tensor(np.zeros((2, self.in_channels, hw, hw))))
            return [(name, (t.shape[2], t.shape[3], t.shape[1])) for name, t, _ in self.trace]
        finally:
            self.trace = None
            self.train(was)


def build_segnet(width_scale: float = 1.0, in_channels: int = 1, seed: int = 0) -> SegNet:
    return SegNet(width_scale, in_channels, seed)


def segment(net: SegNet, roi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities (H, W, 3) and argmax label mask for one preprocessed ROI."""
    roi = np.asarray(roi, np.float32)
    if roi.ndim == 2:
        roi = roi[None]
    if roi.shape[1:] != (ROI_SIZE, ROI_SIZE):
        raise ValueError(f"segment expects a {ROI_SIZE}x{ROI_SIZE} ROI, got {roi.shape[1:]}")
    probs, masks = segment_batch(net, roi[None])
    return probs[0], masks[0]


def segment_batch(net: SegNet, rois: np.ndarray, batch: int = 32) -> tuple[np.ndarray, np.ndarray]:
    net.eval()
    probs = []
    with no_grad():
        for i in range(0, len(rois), batch):
            logits = net(Tensor(rois[i:i + batch])).data
            probs.append(ops.softmax(logits.astype(np.float64), axis=1).transpose(0, 2, 3, 1))
    p = np.concatenate(probs)
    return p.astype(np.float32), p.argmax(axis=-1).astype(np.uint8)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegMetrics:
    precision: float
    recall: float
    f_measure: float
    tp: int = 0
    fp: int = 0
    fn: int = 0


def _ratio(num: int, den: int, empty: Fraction) -> Fraction:
    return Fraction(num, den) if den else empty


def seg_metrics(pred: np.ndarray, gt: np.ndarray, label: int = 1) -> SegMetrics:
    """Precision, recall and F for one class, treated one-vs-rest per pixel.

    Computed on exact fractions of the pixel counts. With no positives in
    either mask all three are 1; otherwise an empty denominator gives 0.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    p, g = pred == label, gt == label
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    if tp + fp + fn == 0:
        return SegMetrics(1.0, 1.0, 1.0, 0, 0, 0)
    prec = _ratio(tp, tp + fp, Fraction(0))
    rec = _ratio(tp, tp + fn, Fraction(0))
    f = 2 * prec * rec / (prec + rec) if prec + rec > 0 else Fraction(0)
    return SegMetrics(float(prec), float(rec), float(f), tp, fp, fn)


@dataclass(frozen=True)
class SegSummary:
    mean: SegMetrics
    std: SegMetrics
    count: int


def aggregate(metrics: Sequence[SegMetrics]) -> SegSummary:
    """Sample mean and population standard deviation of P, R and F."""
    if not metrics:
        raise ValueError("aggregate needs at least one image")
    a = np.array([[m.precision, m.recall, m.f_measure] for m in metrics])
    mu, sd = a.mean(axis=0), a.std(axis=0)
    return SegSummary(SegMetrics(*map(float, mu)), SegMetrics(*map(float, sd)), len(metrics))


# ---------------------------------------------------------------------------
# training data and loop
# ---------------------------------------------------------------------------


def roi_from_box(image: np.ndarray, box_px: tuple, size: int = ROI_SIZE) -> np.ndarray:
    from .geometry import crop_resize
    return crop_resize(np.asarray(image, np.float32), box_px, size, size)


def roi_pair(sample, box=None, size: int = ROI_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Image ROI and label ROI for ``box`` (the sample's iris box by default)."""
    from .geometry import crop_resize
    box = box or sample.iris_box
    h, w = sample.size
    px = box.to_pixels(w, h)
    return roi_from_box(sample.image, px, size), crop_resize(sample.mask, px, size, size, nearest=True)


def jitter_box(box, rng: np.random.Generator, amount: float):
    """Perturb centre and size by up to ``amount`` of the box side, as a detector would."""
    dx, dy, ds = rng.uniform(-amount, amount, 3)
    w = box.w * (1 + ds)
    return replace(box, cx=box.cx + dx * box.w, cy=box.cy + dy * box.h, w=w, h=box.h * (1 + ds))


@dataclass
class SegRecipe(TrainRecipe):
    lr: float = 0.01
    epochs: int = 30
    batch_size: int = 16
    jitter: float = 0.05  # box perturbation applied to half the training ROIs
    clip_norm: Optional[float] = 10.0

    @classmethod
    def desk(cls, **kw) -> "SegRecipe":
        base = dict(epochs=8)
        base.update(kw)
        return cls(**base)


def seg_training_set(samples, channel_means, jitter: float, seed: int):
    from .synth import preprocess
    rng = np.random.default_rng([seed, 23])
    xs, ys = [], []
    for i, s in enumerate(samples):
        box = jitter_box(s.iris_box, rng, jitter) if (jitter and i % 2) else s.iris_box
        roi, lab = roi_pair(s, box)
        xs.append(preprocess(roi, channel_means))
        ys.append(lab)
    return np.stack(xs), np.stack(ys).astype(np.int64)


def train_segmenter(samples, width: float, recipe: SegRecipe, seed: int = 0,
                    on_epoch=None) -> tuple[SegNet, np.ndarray, History]:
    from .detect import channel_means
    means = channel_means(samples)
    x, y = seg_training_set(samples, means, recipe.jitter, seed)
    net = build_segnet(width, x.shape[1], seed)
    hist = fit(net, x, y, lambda m, xb, yb: ops.pixel_xent(m(xb), yb),
               replace(recipe, seed=seed), on_epoch=on_epoch)
    return net, means, hist

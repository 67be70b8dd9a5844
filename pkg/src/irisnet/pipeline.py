"""End-to-end enrollment: detect, crop, mask, embed, encode.

Three ways to turn an eye image and its boxes into the embedder's 100x100
input:

``segmented``   iris-box ROI, resized, non-iris pixels zeroed by the segmenter
``bbox-only``   iris-box ROI with everything outside the box and inside the
                pupil disc zeroed (no segmenter)
``polar-remap`` a 50x200 strip sampled between the pupil and iris circles
                implied by the boxes, folded to 100x100
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .codec import IrisTemplate
from .detect import Detector, box_keep_mask, detect
from .embed import Embedder, extract_features
from .geometry import BBox, crop_resize
from .segment import ROI_SIZE, SegNet, segment_batch
from .synth import IRIS, polar_remap, preprocess

VARIANTS = ("segmented", "bbox-only", "polar-remap")
STRIP_SHAPE = (50, 200)
MODEL_FILES = {"detector": "detector.idln", "segmenter": "segmenter.idln", "embedder": "embedder.idln"}


@dataclass(frozen=True)
class NoDetection:
    """The detector found no iris (or no pupil where the variant needs one)."""

    reason: str


def _check_variant(variant: str) -> None:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


def _as_chw(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, np.float32)
    return image[None] if image.ndim == 2 else image


def iris_roi(image: np.ndarray, iris_box: BBox, size: int = ROI_SIZE) -> np.ndarray:
    image = _as_chw(image)
    h, w = image.shape[1:]
    return crop_resize(image, iris_box.to_pixels(w, h), size, size)


def bbox_roi(image: np.ndarray, iris_box: BBox, pupil_box: BBox, size: int = ROI_SIZE) -> np.ndarray:
    image = _as_chw(image)
    h, w = image.shape[1:]
    keep = box_keep_mask(h, w, iris_box, pupil_box)
    return crop_resize(image * keep, iris_box.to_pixels(w, h), size, size)


def box_strip(image: np.ndarray, iris_box: BBox, pupil_box: BBox,
              shape: tuple = STRIP_SHAPE) -> np.ndarray:
    """Sample rows from the pupil circle (row 0) out to the iris circle and
    columns over a full turn, each circle centred on its box with radius the
    mean half-side. Bilinear, edge-clamped."""
    image = _as_chw(image)
    h, w = image.shape[1:]
    rows, cols = shape

    def circle(box):
        x0, y0, x1, y1 = box.to_pixels(w, h)
        return (x0 + x1) / 2, (y0 + y1) / 2, ((x1 - x0) + (y1 - y0)) / 4

    pcx, pcy, pr = circle(pupil_box)
    icx, icy, ir = circle(iris_box)
    t = (np.arange(rows) + 0.5) / rows
    phi = 2 * np.pi * np.arange(cols) / cols
    xs = (1 - t)[:, None] * (pcx + pr * np.cos(phi)) + t[:, None] * (icx + ir * np.cos(phi)) - 0.5
    ys = (1 - t)[:, None] * (pcy + pr * np.sin(phi)) + t[:, None] * (icy + ir * np.sin(phi)) - 0.5
    return np.stack([_bilinear_points(ch, ys, xs) for ch in image])


def _bilinear_points(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = ys - y0, xs - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def masked_input(roi: np.ndarray, roi_labels: np.ndarray) -> np.ndarray:
    """Zero every ROI pixel not labelled iris."""
    return _as_chw(roi) * (np.asarray(roi_labels) == IRIS)[None]


def oracle_input(sample, variant: str = "segmented") -> np.ndarray:
    """Embedder input built from the sample's ground-truth boxes and mask."""
    _check_variant(variant)
    if variant == "segmented":
        h, w = sample.size
        px = sample.iris_box.to_pixels(w, h)
        labels = crop_resize(sample.mask, px, ROI_SIZE, ROI_SIZE, nearest=True)
        return masked_input(iris_roi(sample.image, sample.iris_box), labels)
    if variant == "bbox-only":
        return bbox_roi(sample.image, sample.iris_box, sample.pupil_box)
    return polar_remap(box_strip(sample.image, sample.iris_box, sample.pupil_box))


@dataclass
class Models:
    detector: Detector
    detector_means: np.ndarray
    embedder: Embedder
    embedder_means: np.ndarray
    segmenter: Optional[SegNet] = None
    segmenter_means: Optional[np.ndarray] = None
    conf_threshold: float = 0.25

    @classmethod
    def load(cls, directory: Union[str, Path], need_segmenter: bool = True, **kw) -> "Models":
        from .serialize import load_model
        d = Path(directory)
        det, dm = load_model(d / MODEL_FILES["detector"], expect="detector")
        emb, em = load_model(d / MODEL_FILES["embedder"], expect="embedder")
        seg = sm = None
        if need_segmenter:
            seg, sm = load_model(d / MODEL_FILES["segmenter"], expect="segmenter")
        return cls(det, dm, emb, em, seg, sm, **kw)


def embedder_inputs(images, models: Models, variant: str = "segmented"):
    """Raw 100x100 embedder inputs for a batch of images, or NoDetection per image."""
    _check_variant(variant)
    images = [_as_chw(im) for im in images]
    dets = detect(models.detector, np.stack(images), models.detector_means, models.conf_threshold)
    return inputs_from_detections(images, dets, models, variant)


def inputs_from_detections(images, dets, models: Models, variant: str = "segmented",
                           roi_labels=None):
    """Second half of :func:`embedder_inputs`. ``dets`` holds one {"iris", "pupil"}
    dict per image; ``roi_labels`` optionally replaces the segmenter's output."""
    _check_variant(variant)
    images = [_as_chw(im) for im in images]
    out: list = [None] * len(images)
    rois, where = [], []
    for i, (im, det) in enumerate(zip(images, dets)):
        iris, pupil = det["iris"], det["pupil"]
        if iris is None:
            out[i] = NoDetection("no iris above the confidence threshold")
        elif variant == "segmented":
            rois.append(iris_roi(im, iris))
            where.append(i)
        elif pupil is None:
            out[i] = NoDetection("no pupil above the confidence threshold")
        elif variant == "bbox-only":
            out[i] = bbox_roi(im, iris, pupil)
        else:
            out[i] = polar_remap(box_strip(im, iris, pupil))
    if rois:
        if roi_labels is not None:
            labels = [roi_labels[i] for i in where]
        elif models.segmenter is None:
            raise ValueError("the segmented variant needs a segmenter")
        else:
            seg_in = np.stack([preprocess(r, models.segmenter_means) for r in rois])
            _, labels = segment_batch(models.segmenter, seg_in)
        for i, roi, lab in zip(where, rois, labels):
            out[i] = masked_input(roi, lab)
    return out


def templates_from_inputs(inputs, models: Models, meta, binary: bool = False) -> list:
    """Features for every real input; NoDetection entries pass through."""
    idx = [i for i, x in enumerate(inputs) if not isinstance(x, NoDetection)]
    out = list(inputs)
    if idx:
        x = np.stack([preprocess(inputs[i], models.embedder_means) for i in idx])
        feats = extract_features(x, models.embedder)
        for i, f in zip(idx, feats):
            subject, eye, spectrum, sample = meta[i]
            out[i] = IrisTemplate.from_features(f, subject, eye, spectrum, sample, binary)
    return out


def end_to_end(image: np.ndarray, models: Models, subject: str = "", eye: str = "left",
               spectrum: str = "NIR", sample: str = "", variant: str = "segmented",
               binary: bool = False) -> Union[IrisTemplate, NoDetection]:
    inputs = embedder_inputs([image], models, variant)
    return templates_from_inputs(inputs, models, [(subject, eye, spectrum, sample)], binary)[0]


def input_means(inputs: np.ndarray) -> np.ndarray:
    """Per-channel mean of a stack of (C, H, W) embedder inputs."""
    return np.asarray(inputs, np.float64).mean(axis=(0, 2, 3)).astype(np.float32)


def train_embedder_from_samples(samples, cfg_overrides: dict, recipe, variant="segmented",
                                seed: int = 0, on_epoch=None):
    """Train on ground-truth inputs; one class per subject-eye label.

    ``variant`` may name several input styles; each sample then contributes
    one training input per style, which lets one embedder serve all of them.
    Returns (net, channel means, history, class labels in id order).
    """
    from .embed import EmbedderConfig, train_embedder
    variants = (variant,) if isinstance(variant, str) else tuple(variant)
    for v in variants:
        _check_variant(v)
    classes = sorted({s.label for s in samples})
    if len(classes) < 2:
        raise ValueError(f"need at least two subject-eye classes, got {len(classes)}")
    ids = {lab: k for k, lab in enumerate(classes)}
    raw = np.stack([oracle_input(s, v) for v in variants for s in samples])
    labels = [ids[s.label] for _ in variants for s in samples]
    means = input_means(raw)
    x = np.stack([preprocess(r, means) for r in raw])
    cfg = EmbedderConfig(classes=len(classes), in_channels=raw.shape[1], **cfg_overrides)
    net, hist = train_embedder(x, labels, cfg, recipe, seed, on_epoch)
    return net, means, hist, classes

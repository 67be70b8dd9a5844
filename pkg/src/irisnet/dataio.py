"""Annotation files, masks, images and the dataset manifest.

Box files hold one object per line::

    image-path,class,cx,cy,w,h

with coordinates normalised to the image and written to 6 decimals. Masks
are 8-bit single-channel PGM files with values in {0, 1, 2}. The manifest is
a CSV with one sample per row; relative paths resolve against the manifest's
directory.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .geometry import CLASSES, BBox
from .synth import AnnotatedSample, make_identities, synth_eye

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("image", "mask", "boxes", "subject", "eye", "spectrum")


class FormatError(ValueError):
    """A text record that does not parse; carries the file and line number."""

    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = str(path)
        self.lineno = lineno


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def format_box(image: str, box: BBox) -> str:
    return ",".join([image, box.cls, _fmt(box.cx), _fmt(box.cy), _fmt(box.w), _fmt(box.h)])


def save_boxes(path, records: Iterable[tuple[str, BBox]]) -> None:
    with open(path, "w", newline="\n") as f:
        for image, box in records:
            if "," in image:
                raise ValueError(f"image path may not contain a comma: {image!r}")
            f.write(format_box(image, box) + "\n")


def _parse_box(path, lineno: int, line: str, n_fields: int = 6) -> tuple[str, BBox, list[str]]:
    parts = [p.strip() for p in line.split(",")]
    if len(parts) != n_fields:
        raise FormatError(path, lineno, f"expected {n_fields} comma-separated fields, got {len(parts)}")
    image, cls = parts[0], parts[1]
    if cls not in CLASSES:
        raise FormatError(path, lineno, f"unknown class {cls!r}")
    try:
        cx, cy, w, h = (float(p) for p in parts[2:6])
    except ValueError as e:
        raise FormatError(path, lineno, str(e)) from None
    box = BBox(cls, cx, cy, w, h)
    if not box.is_valid():
        raise FormatError(path, lineno, f"box out of range: {cx}, {cy}, {w}, {h}")
    return image, box, parts[6:]


def load_boxes(path) -> list[tuple[str, BBox]]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            image, box, _ = _parse_box(path, lineno, line)
            out.append((image, box))
    return out


def save_detections(path, records: Iterable[tuple[str, BBox]]) -> None:
    """Detector output: the box format plus a trailing confidence column."""
    with open(path, "w", newline="\n") as f:
        for image, box in records:
            f.write(format_box(image, box) + "," + _fmt(box.confidence) + "\n")


def load_detections(path) -> list[tuple[str, BBox]]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            image, box, rest = _parse_box(path, lineno, line, n_fields=7)
            try:
                conf = float(rest[0])
            except ValueError as e:
                raise FormatError(path, lineno, str(e)) from None
            out.append((image, box.with_confidence(conf)))
    return out


def save_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.isin(mask, (0, 1, 2)).all():
        raise ValueError("mask values must be in {0, 1, 2}")
    Image.fromarray(mask.astype(np.uint8)).save(path, format="PPM")


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: mask must be 8-bit single channel, got mode {im.mode}")
        m = np.array(im, dtype=np.uint8)
    bad = ~np.isin(m, (0, 1, 2))
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise ValueError(f"{path}: mask value {m[y, x]} at ({y}, {x}) not in {{0, 1, 2}}")
    return m


def save_image(path, image: np.ndarray) -> None:
    """Write a (C, H, W) float image in [0, 1] as an 8-bit PNG."""
    a = np.asarray(image)
    if a.ndim == 3:
        a = a[0] if a.shape[0] == 1 else np.moveaxis(a, 0, -1)
    a8 = np.clip(np.round(a * 255), 0, 255).astype(np.uint8)
    Image.fromarray(a8).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Read a PNG back as (C, H, W) float32 in [0, 1]."""
    with Image.open(path) as im:
        a = np.array(im)
    if a.ndim == 2:
        a = a[None]
    else:
        a = np.moveaxis(a[..., :3], -1, 0)
    return (a.astype(np.float32) / 255.0)


def quantize(image: np.ndarray) -> np.ndarray:
    """The value an image takes after a PNG round trip."""
    return (np.clip(np.round(np.asarray(image) * 255), 0, 255) / 255.0).astype(np.float32)


@dataclass
class ManifestRow:
    image: str
    mask: str
    boxes: str
    subject: str
    eye: str
    spectrum: str


def write_manifest(path, rows: Iterable[ManifestRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([getattr(r, k) for k in MANIFEST_FIELDS])


def read_manifest(path, check_paths: bool = True) -> list[ManifestRow]:
    base = Path(path).parent
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_FIELDS:
            raise FormatError(path, 1, f"manifest header must be {','.join(MANIFEST_FIELDS)}")
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != len(MANIFEST_FIELDS):
                raise FormatError(path, lineno, f"expected {len(MANIFEST_FIELDS)} fields, got {len(rec)}")
            row = ManifestRow(*rec)
            if check_paths:
                for k in ("image", "mask", "boxes"):
                    if not (base / getattr(row, k)).exists():
                        raise FormatError(path, lineno, f"missing {k} file {getattr(row, k)}")
            rows.append(row)
    return rows


def load_sample(row: ManifestRow, base) -> AnnotatedSample:
    base = Path(base)
    boxes = {b.cls: b for _, b in load_boxes(base / row.boxes)}
    if set(boxes) != set(CLASSES):
        raise ValueError(f"{row.boxes}: need exactly one iris and one pupil box")
    return AnnotatedSample(load_image(base / row.image), boxes["iris"], boxes["pupil"],
                           load_mask(base / row.mask), row.subject, row.eye, row.spectrum)


def load_dataset(manifest) -> list[AnnotatedSample]:
    base = Path(manifest).parent
    return [load_sample(r, base) for r in read_manifest(manifest)]


def write_sample(out_dir, name: str, sample: AnnotatedSample) -> ManifestRow:
    out_dir = Path(out_dir)
    img, msk, box = f"images/{name}.png", f"masks/{name}.pgm", f"boxes/{name}.txt"
    for sub in ("images", "masks", "boxes"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    save_image(out_dir / img, sample.image)
    save_mask(out_dir / msk, sample.mask)
    save_boxes(out_dir / box, [(img, b) for b in sample.boxes()])
    return ManifestRow(img, msk, box, sample.subject, sample.eye, sample.spectrum)


def synth_samples(n_identities: int, per_identity: int, spectrum: str = "NIR", size: int = 128,
                  first_identity: int = 0, first_pose: int = 0) -> list[AnnotatedSample]:
    """Deterministic synthetic set; pose seeds are ``first_pose + k``."""
    out = []
    for ident in make_identities(n_identities, spectrum, first_identity):
        out += [synth_eye(ident, first_pose + k, size) for k in range(per_identity)]
    return out


def generate_dataset(out_dir, n_identities: int, per_identity: int, spectrum: str = "NIR",
                     size: int = 128, first_identity: int = 0, first_pose: int = 0,
                     manifest_name: str = "manifest.csv") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(synth_samples(n_identities, per_identity, spectrum, size,
                                        first_identity, first_pose)):
        rows.append(write_sample(out_dir, f"{s.subject}_{s.eye}_{i:05d}", s))
    path = out_dir / manifest_name
    write_manifest(path, rows)
    log.info("wrote %d samples to %s", len(rows), out_dir)
    return path


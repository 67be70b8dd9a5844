"""Iris templates: real pool5 vectors matched by cosine, or zero-thresholded
binary codes matched by Hamming distance.

Binary codes pack bit i of the feature vector (1 iff feature i > 0, so an
exact zero is 0) into little-endian 64-bit words, least significant bit first.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

REAL, BINARY = "real", "binary"
_TAGS = {REAL: 0, BINARY: 1}
GALLERY_MAGIC = b"IGAL"
GALLERY_VERSION = 1
_HEADER = struct.Struct("<4sIBII")  # magic, version, representation, dim, count


def n_words(dim: int) -> int:
    return (dim + 63) // 64


def binarize(features: np.ndarray) -> np.ndarray:
    """Pack ``features > 0`` into uint64 words (little-endian bit order)."""
    f = np.asarray(features)
    if f.ndim != 1:
        raise ValueError("binarize takes a single feature vector")
    if not np.isfinite(f).all():
        raise ValueError("cannot binarize non-finite features")
    bits = np.zeros(n_words(f.size) * 64, np.uint8)
    bits[:f.size] = f > 0
    return np.packbits(bits, bitorder="little").view("<u8").copy()


def unpack_bits(code: np.ndarray, dim: int) -> np.ndarray:
    raw = np.ascontiguousarray(code, dtype="<u8").view(np.uint8)
    return np.unpackbits(raw, bitorder="little")[:dim]


def hamming(a: np.ndarray, b: np.ndarray, dim: int | None = None) -> float:
    """Fraction of differing bits. ``dim`` defaults to every bit of the words."""
    a, b = np.asarray(a, np.uint64), np.asarray(b, np.uint64)
    if a.shape != b.shape:
        raise ValueError(f"code lengths differ: {a.shape} vs {b.shape}")
    dim = a.size * 64 if dim is None else dim
    return int(np.bitwise_count(a ^ b).sum()) / dim


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"vector lengths differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score of a zero vector")
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class IrisTemplate:
    subject: str
    eye: str
    spectrum: str
    payload: np.ndarray  # float32 (dim,) or uint64 (ceil(dim/64),)
    dim: int
    sample: str = ""

    def __post_init__(self):
        if self.eye not in ("left", "right"):
            raise ValueError(f"eye must be left or right, got {self.eye!r}")
        want = n_words(self.dim) if self.representation == BINARY else self.dim
        if self.payload.ndim != 1 or self.payload.size != want:
            raise ValueError(f"payload holds {self.payload.size} values, dim {self.dim} needs {want}")

    @property
    def representation(self) -> str:
        return BINARY if self.payload.dtype == np.uint64 else REAL

    @property
    def key(self) -> str:
        return f"{self.subject}/{self.eye}/{self.sample}"

    @property
    def label(self) -> str:
        return f"{self.subject}/{self.eye}"

    @classmethod
    def from_features(cls, features, subject: str, eye: str, spectrum: str = "NIR",
                      sample: str = "", binary: bool = False) -> "IrisTemplate":
        f = np.asarray(features, np.float32)
        payload = binarize(f) if binary else f.copy()
        return cls(subject, eye, spectrum, payload, f.size, sample)

    def record_bytes(self) -> bytes:
        dt = "<u8" if self.representation == BINARY else "<f4"
        return self.payload.astype(dt).tobytes()


def score(a: IrisTemplate, b: IrisTemplate) -> float:
    """Similarity for cosine, distance for Hamming."""
    if a.representation != b.representation or a.dim != b.dim:
        raise ValueError(f"cannot compare {a.representation}/{a.dim} with {b.representation}/{b.dim}")
    if a.representation == BINARY:
        return hamming(a.payload, b.payload, a.dim)
    return cosine_score(a.payload, b.payload)


class Gallery:
    """An immutable, homogeneous set of enrolled templates."""

    def __init__(self, templates: Iterable[IrisTemplate]):
        self.templates = tuple(templates)
        if not self.templates:
            raise ValueError("empty gallery")
        reps = {(t.representation, t.dim) for t in self.templates}
        if len(reps) != 1:
            raise ValueError(f"gallery mixes representations {sorted(reps)}")
        (self.representation, self.dim), = reps
        keys = [t.key for t in self.templates]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate gallery key")

    def __len__(self):
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)

    @property
    def record_size(self) -> int:
        return 8 * n_words(self.dim) if self.representation == BINARY else 4 * self.dim

    def save(self, path: Union[str, Path]) -> tuple[Path, Path]:
        """Write ``<path>`` (header + fixed-width records) and the ``.idx`` key file."""
        path = Path(path)
        idx = path.with_suffix(".idx")
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(GALLERY_MAGIC, GALLERY_VERSION, _TAGS[self.representation],
                                  self.dim, len(self)))
            for t in self.templates:
                fh.write(t.record_bytes())
        with open(idx, "w") as fh:
            for t in self.templates:
                fh.write(f"{t.subject}\t{t.eye}\t{t.spectrum}\t{t.sample}\n")
        return path, idx

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Gallery":
        path = Path(path)
        data = path.read_bytes()
        if len(data) < _HEADER.size:
            raise ValueError(f"{path}: truncated gallery header")
        magic, version, tag, dim, count = _HEADER.unpack_from(data)
        if magic != GALLERY_MAGIC:
            raise ValueError(f"{path}: not a gallery file")
        if version != GALLERY_VERSION:
            raise ValueError(f"{path}: unsupported gallery version {version}")
        rep = {v: k for k, v in _TAGS.items()}.get(tag)
        if rep is None:
            raise ValueError(f"{path}: unknown representation tag {tag}")
        dt, per = ("<u8", n_words(dim)) if rep == BINARY else ("<f4", dim)
        body = data[_HEADER.size:]
        if len(body) != count * per * np.dtype(dt).itemsize:
            raise ValueError(f"{path}: expected {count} records, file size disagrees")
        payloads = np.frombuffer(body, dt).reshape(count, per)
        lines = [ln for ln in path.with_suffix(".idx").read_text().splitlines() if ln]
        if len(lines) != count:
            raise ValueError(f"{path}: index lists {len(lines)} keys for {count} records")
        out = []
        for row, line in zip(payloads, lines):
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}: bad index line {line!r}")
            subj, eye, spec, sample = parts
            native = row.astype(np.uint64) if rep == BINARY else row.astype(np.float32)
            out.append(IrisTemplate(subj, eye, spec, native, dim, sample))
        return cls(out)


def match_probe(probe: IrisTemplate, gallery: Gallery) -> list[tuple[str, float]]:
    """Every gallery key with its score, best first; ties broken by key."""
    if (probe.representation, probe.dim) != (gallery.representation, gallery.dim):
        raise ValueError(f"probe is {probe.representation}/{probe.dim}, "
                         f"gallery is {gallery.representation}/{gallery.dim}")
    scored = [(t.key, score(probe, t)) for t in gallery]
    sign = 1.0 if gallery.representation == BINARY else -1.0
    return sorted(scored, key=lambda ks: (sign * ks[1], ks[0]))


def format_scores(ranked: Sequence[tuple[str, float]]) -> str:
    return "".join(f"{k} {s:.6f}\n" for k, s in ranked)


def write_scores(path: Union[str, Path], ranked: Sequence[tuple[str, float]]) -> None:
    Path(path).write_text(format_scores(ranked))


def read_scores(path: Union[str, Path]) -> list[tuple[str, float]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'key score'")
        out.append((parts[0], float(parts[1])))
    return out

"""Synthetic eye images with exact boxes and masks, plus augmentation.

An identity fixes the iris texture (a bank of polar cosines, a collarette
ring and a few crypt-like spots) and the plausible radius ranges. A pose seed
fixes everything that varies between captures of the same eye: position,
size, pupil dilation, a small rotation, eyelid placement, illumination and
sensor noise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import BBox, scale_about_center

log = logging.getLogger(__name__)

BACKGROUND, IRIS, PUPIL = 0, 1, 2
SCALE_FACTORS = (0.8, 0.9, 1.1)
TRANSLATION_FRACTION = 0.08


@dataclass(frozen=True)
class SyntheticIdentity:
    seed: int
    subject: str
    eye: str = "left"
    spectrum: str = "NIR"
    angular_freqs: tuple = ()
    radial_freqs: tuple = ()
    phases: tuple = ()
    amplitudes: tuple = ()
    spots: tuple = ()  # (rho, phi, radius, depth)
    collarette: float = 0.35
    iris_radius: tuple = (0.16, 0.22)  # fraction of image size
    pupil_ratio: tuple = (0.3, 0.45)  # pupil radius / iris radius
    base: tuple = (0.45,)

    @classmethod
    def from_seed(cls, seed: int, spectrum: str = "NIR", eye: str = "left",
                  n_components: int = 6, n_spots: int = 5) -> "SyntheticIdentity":
        if spectrum not in ("NIR", "VS"):
            raise ValueError(f"spectrum must be NIR or VS, got {spectrum!r}")
        r = np.random.default_rng([7919, seed])
        r_lo = r.uniform(0.15, 0.19)
        p_lo = r.uniform(0.28, 0.36)
        if spectrum == "NIR":
            base = (float(r.uniform(0.35, 0.55)),)
        else:
            palette = np.array([[0.45, 0.28, 0.15], [0.30, 0.45, 0.60], [0.35, 0.45, 0.25]])
            base = tuple(float(v) for v in np.clip(palette[r.integers(3)] + r.normal(0, 0.04, 3), 0.05, 0.9))
        return cls(
            seed=seed,
            subject=f"id{seed:04d}",
            eye=eye,
            spectrum=spectrum,
            angular_freqs=tuple(int(v) for v in r.integers(2, 11, n_components)),
            radial_freqs=tuple(float(v) for v in r.uniform(0.5, 3.0, n_components)),
            phases=tuple(float(v) for v in r.uniform(0, 2 * np.pi, n_components)),
            amplitudes=tuple(float(v) for v in r.uniform(0.5, 1.0, n_components) / n_components * 2.2),
            spots=tuple((float(r.uniform(0.2, 0.85)), float(r.uniform(0, 2 * np.pi)),
                         float(r.uniform(0.05, 0.1)), float(r.uniform(0.15, 0.3)))
                        for _ in range(n_spots)),
            collarette=float(r.uniform(0.25, 0.45)),
            iris_radius=(float(r_lo), float(r_lo + 0.04)),
            pupil_ratio=(float(p_lo), float(p_lo + 0.12)),
            base=base,
        )

    @property
    def channels(self) -> int:
        return len(self.base)

    @property
    def label(self) -> str:
        return f"{self.subject}_{self.eye}"

    def texture(self, rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
        """Zero-mean-ish texture in normalised polar coordinates (rho in [0, 1])."""
        t = np.zeros_like(rho)
        for m, f, p, a in zip(self.angular_freqs, self.radial_freqs, self.phases, self.amplitudes):
            t += a * np.cos(m * phi + 2 * np.pi * f * rho + p)
        t += 0.25 * np.exp(-((rho - self.collarette) / 0.05) ** 2)
        for sr, sp, size, depth in self.spots:
            dx = rho * np.cos(phi) - sr * np.cos(sp)
            dy = rho * np.sin(phi) - sr * np.sin(sp)
            t -= depth * 3 * np.exp(-(dx * dx + dy * dy) / (2 * size * size))
        return t


@dataclass
class AnnotatedSample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    iris_box: BBox
    pupil_box: BBox
    mask: np.ndarray  # (H, W) uint8 in {0, 1, 2}
    subject: str
    eye: str
    spectrum: str
    geometry: dict = field(default_factory=dict)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1:]

    @property
    def label(self) -> str:
        return f"{self.subject}_{self.eye}"

    def boxes(self) -> list[BBox]:
        return [self.iris_box, self.pupil_box]

    def check(self) -> None:
        """Raise if the containment invariants between mask and boxes fail."""
        h, w = self.mask.shape
        for cls_id, box in ((IRIS, self.iris_box), (PUPIL, self.pupil_box)):
            ys, xs = np.nonzero(self.mask == cls_id)
            if len(ys) == 0:
                continue
            x0, y0, x1, y1 = box.to_pixels(w, h)
            if xs.min() + 0.5 < x0 or xs.max() + 0.5 > x1 or ys.min() + 0.5 < y0 or ys.max() + 0.5 > y1:
                raise AssertionError(f"{box.cls} pixels fall outside the {box.cls} box")
        if not self.iris_box.contains(self.pupil_box):
            raise AssertionError("pupil box not inside iris box")


def render_mask(geom: dict, h: int, w: int) -> np.ndarray:
    """Rasterise the label mask from eye geometry (pixel centres at +0.5)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    upper = geom["lid_top"] + geom["curve"] * (xx - geom["cx"]) ** 2
    lower = geom["lid_bot"] - geom["curve"] * (xx - geom["cx"]) ** 2
    open_eye = (yy >= upper) & (yy <= lower)
    in_pupil = np.hypot(xx - geom["pcx"], yy - geom["pcy"]) <= geom["r_pupil"]
    in_iris = (np.hypot(xx - geom["cx"], yy - geom["cy"]) <= geom["r_iris"]) & ~in_pupil
    mask = np.zeros((h, w), np.uint8)
    mask[in_iris & open_eye] = IRIS
    mask[in_pupil & open_eye] = PUPIL
    return mask


def synth_eye(identity: SyntheticIdentity, pose_seed: int, size: int = 128,
              occlusion: bool = True, margin: float = 0.09) -> AnnotatedSample:
    """Render one capture of ``identity``; all randomness comes from the seeds.

    ``margin`` is the minimum gap between the iris and the frame edge as a
    fraction of ``size``. The default leaves room for every augmentation
    variant.
    """
    r = np.random.default_rng([identity.seed, pose_seed, size])
    r_iris = size * r.uniform(*identity.iris_radius)
    ratio = r.uniform(*identity.pupil_ratio)
    r_pupil = ratio * r_iris
    margin = max(margin * size, 1.0)
    if r_iris + margin > size / 2 or r_pupil <= 1 or ratio >= 0.9:
        raise ValueError("degenerate eye geometry for this image size")
    cx = r.uniform(r_iris + margin, size - r_iris - margin)
    cy = r.uniform(r_iris + margin, size - r_iris - margin)
    off_max = 0.06 * r_iris
    pcx = cx + r.uniform(-off_max, off_max)
    pcy = cy + r.uniform(-off_max, off_max)
    rotation = r.uniform(-0.08, 0.08)
    gain = r.uniform(0.92, 1.08)
    bias = r.uniform(-0.03, 0.03)
    noise = 0.02

    lid_top = cy - r_iris * r.uniform(0.7, 1.15) if occlusion else -np.inf
    lid_bot = cy + r_iris * r.uniform(0.85, 1.3) if occlusion else np.inf
    curve = r.uniform(0.4, 0.8) / size

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    d_iris = np.hypot(xx - cx, yy - cy)
    d_pupil = np.hypot(xx - pcx, yy - pcy)
    # eyelids are parabolas opening away from the eye centre
    upper = lid_top + curve * (xx - cx) ** 2
    lower = lid_bot - curve * (xx - cx) ** 2
    geom = dict(cx=cx, cy=cy, r_iris=r_iris, pcx=pcx, pcy=pcy, r_pupil=r_pupil,
                rotation=rotation, lid_top=lid_top, lid_bot=lid_bot, curve=curve)
    mask = render_mask(geom, size, size)

    # texture lives in the annulus between pupil and limbus
    phi = np.arctan2(yy - cy, xx - cx) - rotation
    rho = np.clip((d_pupil - r_pupil) / np.maximum(r_iris - r_pupil, 1e-6), 0, 1)
    tex = identity.texture(rho, phi)

    nc = identity.channels
    if nc == 1:
        sclera, skin, pupil_v = np.array([0.78]), np.array([0.55]), np.array([0.06])
    else:
        sclera, skin, pupil_v = np.array([0.85, 0.82, 0.80]), np.array([0.72, 0.55, 0.45]), np.array([0.05, 0.04, 0.04])
    base = np.asarray(identity.base)
    img = np.empty((nc, size, size))
    shade = 0.05 * (yy - size / 2) / size
    limbus = np.clip(r_iris + 0.5 - d_iris, 0, 1)  # soft limbus edge
    pupil_edge = np.clip(r_pupil + 0.5 - d_pupil, 0, 1)
    lid_edge = np.clip(np.minimum(yy - upper, lower - yy) + 0.5, 0, 1)
    for c in range(nc):
        iris_c = base[c] * (1 + 0.5 * tex) - 0.08 * rho
        v = sclera[c] + shade
        v = v * (1 - limbus) + iris_c * limbus
        v = v * (1 - pupil_edge) + pupil_v[c] * pupil_edge
        skin_c = skin[c] + 0.03 * np.sin(xx / 3.0 + c)
        v = v * lid_edge + skin_c * (1 - lid_edge)
        img[c] = v
    img = img * gain + bias + r.normal(0, noise, img.shape)
    img = np.clip(img, 0, 1).astype(np.float32)

    iris_box = BBox("iris", cx / size, cy / size, 2 * r_iris / size, 2 * r_iris / size)
    pupil_box = BBox("pupil", pcx / size, pcy / size, 2 * r_pupil / size, 2 * r_pupil / size)
    return AnnotatedSample(img, iris_box, pupil_box, mask, identity.subject, identity.eye,
                           identity.spectrum, geom)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _shift(a: np.ndarray, dx: int, dy: int, edge: bool) -> np.ndarray:
    """Translate the last two axes by whole pixels."""
    pad = [(0, 0)] * (a.ndim - 2) + [(abs(dy), abs(dy)), (abs(dx), abs(dx))]
    p = np.pad(a, pad, mode="edge" if edge else "constant")
    h, w = a.shape[-2:]
    y0, x0 = abs(dy) - dy, abs(dx) - dx
    return p[..., y0:y0 + h, x0:x0 + w]


def translate(sample: AnnotatedSample, dx: int, dy: int) -> AnnotatedSample:
    h, w = sample.size
    g = dict(sample.geometry)
    for k in ("cx", "pcx"):
        if k in g:
            g[k] += dx
    for k in ("cy", "pcy", "lid_top", "lid_bot"):
        if k in g:
            g[k] += dy
    move = lambda b: replace(b, cx=b.cx + dx / w, cy=b.cy + dy / h)  # noqa: E731
    return replace(sample, image=_shift(sample.image, dx, dy, True),
                   mask=_shift(sample.mask, dx, dy, False),
                   iris_box=move(sample.iris_box), pupil_box=move(sample.pupil_box), geometry=g)


def scale(sample: AnnotatedSample, factor: float) -> AnnotatedSample:
    h, w = sample.size

    def sb(b: BBox) -> BBox:
        return replace(b, cx=0.5 + (b.cx - 0.5) * factor, cy=0.5 + (b.cy - 0.5) * factor,
                       w=b.w * factor, h=b.h * factor)

    g = dict(sample.geometry)
    for k in ("cx", "pcx"):
        if k in g:
            g[k] = w / 2 + (g[k] - w / 2) * factor
    for k in ("cy", "pcy", "lid_top", "lid_bot"):
        if k in g:
            g[k] = h / 2 + (g[k] - h / 2) * factor
    for k in ("r_iris", "r_pupil"):
        if k in g:
            g[k] *= factor
    if "curve" in g:
        g["curve"] /= factor
    if {"cx", "r_iris", "lid_top"} <= g.keys():
        # exact labels from the scaled geometry; resampling the mask would drift by half a pixel
        mask = render_mask(g, h, w)
    else:
        mask = scale_about_center(sample.mask, factor, nearest=True, fill=0)
    return replace(sample, image=scale_about_center(sample.image, factor), mask=mask,
                   iris_box=sb(sample.iris_box), pupil_box=sb(sample.pupil_box), geometry=g)


def hflip(sample: AnnotatedSample) -> AnnotatedSample:
    h, w = sample.size
    g = dict(sample.geometry)
    for k in ("cx", "pcx"):
        if k in g:
            g[k] = w - g[k]
    if "rotation" in g:
        g["rotation"] = -g["rotation"]
    fb = lambda b: replace(b, cx=1.0 - b.cx)  # noqa: E731
    return replace(sample, image=sample.image[..., ::-1].copy(), mask=sample.mask[:, ::-1].copy(),
                   iris_box=fb(sample.iris_box), pupil_box=fb(sample.pupil_box), geometry=g)


def augment(sample: AnnotatedSample, kind: str = "embedder",
            shift: Optional[int] = None) -> list[AnnotatedSample]:
    """Original + 4 translations + 3 scalings; the detector recipe adds a flip.

    Variants that push the iris box out of the frame are dropped and counted
    in a logged warning.
    """
    if kind not in ("embedder", "detector"):
        raise ValueError(f"unknown augmentation recipe {kind!r}")
    h, w = sample.size
    d = shift if shift is not None else int(round(TRANSLATION_FRACTION * w))
    candidates = [sample]
    candidates += [translate(sample, dx, dy) for dx, dy in ((d, 0), (-d, 0), (0, d), (0, -d))]
    candidates += [scale(sample, f) for f in SCALE_FACTORS]
    if kind == "detector":
        candidates.append(hflip(sample))
    kept = [s for s in candidates if s.iris_box.inside_frame()]
    skipped = len(candidates) - len(kept)
    if skipped:
        log.warning("augment: skipped %d variant(s) that pushed the iris out of frame", skipped)
    return kept


# ---------------------------------------------------------------------------
# polar strip remap and preprocessing
# ---------------------------------------------------------------------------


def polar_remap(strip: np.ndarray) -> np.ndarray:
    """Fold a 50x200 normalised iris strip into 100x100: left half on top."""
    strip = np.asarray(strip)
    if strip.shape[-2:] != (50, 200):
        raise ValueError(f"polar_remap expects a 50x200 strip, got {strip.shape[-2:]}")
    return np.concatenate([strip[..., :, :100], strip[..., :, 100:]], axis=-2)


def polar_unmap(square: np.ndarray) -> np.ndarray:
    square = np.asarray(square)
    if square.shape[-2:] != (100, 100):
        raise ValueError(f"polar_unmap expects 100x100, got {square.shape[-2:]}")
    return np.concatenate([square[..., :50, :], square[..., 50:, :]], axis=-1)


def preprocess(image: np.ndarray, channel_means, size: Optional[tuple] = None) -> np.ndarray:
    """Subtract per-channel means, then resize (bilinear) to ``size``."""
    from .geometry import resize

    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    means = np.asarray(channel_means, dtype=np.float32).reshape(-1)
    if len(means) != image.shape[0]:
        raise ValueError(f"{len(means)} channel means for a {image.shape[0]}-channel image")
    out = image - means[:, None, None]
    if size is not None and tuple(out.shape[1:]) != tuple(size):
        out = resize(out, size[0], size[1])
    return out.astype(np.float32)


def make_identities(n: int, spectrum: str = "NIR", first_seed: int = 0) -> list[SyntheticIdentity]:
    return [SyntheticIdentity.from_seed(first_seed + i, spectrum) for i in range(n)]

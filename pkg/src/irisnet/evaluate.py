"""Verification metrics (EER, ROC, AUC) and the gallery/probe protocol.

Scores follow one convention: higher means more likely genuine. A score
equal to the threshold is accepted. Hamming distances are negated on the way
in so both metrics share the machinery.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .codec import BINARY, IrisTemplate, score


@dataclass
class ScoreSet:
    genuine: list = field(default_factory=list)
    impostor: list = field(default_factory=list)

    def check(self) -> None:
        if not len(self.genuine) or not len(self.impostor):
            raise ValueError("need at least one genuine and one impostor score")

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        self.check()
        return np.asarray(self.genuine, np.float64), np.asarray(self.impostor, np.float64)


def _error_counts(scores: ScoreSet):
    """Distinct thresholds and integer (false accepts, false rejects) at each.

    At threshold t: false accept = impostor >= t, false reject = genuine < t.
    """
    g, i = scores.arrays()
    t = np.unique(np.concatenate([g, i]))
    fa = len(i) - np.searchsorted(np.sort(i), t, side="left")
    fr = np.searchsorted(np.sort(g), t, side="left")
    return t, fa, fr, len(g), len(i)


def eer(scores: ScoreSet) -> float:
    """Equal error rate with a linear interpolation of the FAR/FRR crossing.

    Sentinels below and above every score give (FAR, FRR) = (1, 0) and (0, 1),
    so a crossing always exists.
    """
    t, fa, fr, ng, ni = _error_counts(scores)
    far = np.concatenate([[1.0], fa / ni, [0.0]])
    frr = np.concatenate([[0.0], fr / ng, [1.0]])
    d = far - frr
    k = int(np.argmax(d <= 0))
    if d[k] == 0:
        return float(far[k])
    lam = d[k - 1] / (d[k - 1] - d[k])
    return float(far[k - 1] + lam * (far[k] - far[k - 1]))


@dataclass
class RocResult:
    far: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    auc_exact: Fraction

    @property
    def frr(self) -> np.ndarray:
        return 1.0 - self.tpr


def roc_auc(scores: ScoreSet) -> RocResult:
    """ROC points at every distinct threshold, from (1, 1) down to (0, 0), and
    the trapezoid area computed on integer counts."""
    t, fa, fr, ng, ni = _error_counts(scores)
    tp = ng - fr
    # prepend the accept-everything corner, append the reject-everything corner
    fa_all = np.concatenate([[ni], fa, [0]]).astype(np.int64)
    tp_all = np.concatenate([[ng], tp, [0]]).astype(np.int64)
    thr = np.concatenate([[-np.inf], t, [np.inf]])
    twice = int(np.sum((fa_all[:-1] - fa_all[1:]) * (tp_all[:-1] + tp_all[1:])))
    auc = Fraction(twice, 2 * ng * ni)
    return RocResult(fa_all / ni, tp_all / ng, thr, float(auc), auc)


# ---------------------------------------------------------------------------
# protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolSpec:
    split: float = 0.5  # gallery share of each subject-eye's samples
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValueError("split must lie strictly between 0 and 1")


def split_gallery_probe(labels: Sequence[str], spec: ProtocolSpec) -> tuple[list[int], list[int]]:
    """Stratified split: each label keeps ``round(n * split)`` samples (at least
    one, and at most n - 1 when it has two or more) in the gallery."""
    groups = defaultdict(list)
    for i, lab in enumerate(labels):
        groups[lab].append(i)
    rng = np.random.default_rng([spec.seed, 29])
    gallery, probe = [], []
    for lab in sorted(groups):
        idx = groups[lab]
        order = [idx[j] for j in rng.permutation(len(idx))]
        n = len(order)
        k = min(max(1, int(round(n * spec.split))), max(1, n - 1))
        gallery += order[:k]
        probe += order[k:]
    return sorted(gallery), sorted(probe)


def similarity(a: IrisTemplate, b: IrisTemplate) -> float:
    s = score(a, b)
    return -s if a.representation == BINARY else s


def score_matrix(probes: Sequence[IrisTemplate], gallery: Sequence[IrisTemplate]) -> np.ndarray:
    return np.array([[similarity(p, g) for g in gallery] for p in probes], np.float64).reshape(
        len(probes), len(gallery))


@dataclass
class ProtocolResult:
    scores: ScoreSet
    gallery: list
    probe: list
    matrix: np.ndarray  # probe x gallery similarities

    def rank1(self, labels: Sequence[str]) -> float:
        """Share of probes whose best gallery match has the probe's label."""
        if not self.probe:
            raise ValueError("no probes")
        best = self.matrix.argmax(axis=1)
        return float(np.mean([labels[p] == labels[self.gallery[b]] for p, b in zip(self.probe, best)]))


def protocol(templates: Sequence[IrisTemplate], spec: ProtocolSpec) -> ProtocolResult:
    labels = [t.label for t in templates]
    gal, prb = split_gallery_probe(labels, spec)
    m = score_matrix([templates[i] for i in prb], [templates[i] for i in gal])
    same = np.array([[labels[p] == labels[g] for g in gal] for p in prb], bool).reshape(m.shape)
    if not same.any():
        raise ValueError("no genuine pairs: every subject-eye needs two samples")
    return ProtocolResult(ScoreSet(m[same].tolist(), m[~same].tolist()), gal, prb, m)


def run_protocol(templates: Sequence[IrisTemplate], spec: ProtocolSpec = ProtocolSpec()) -> ScoreSet:
    return protocol(templates, spec).scores


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def write_scoreset(path: Union[str, Path], scores: ScoreSet) -> None:
    with open(path, "w") as fh:
        for label, vals in (("genuine", scores.genuine), ("impostor", scores.impostor)):
            for v in vals:
                fh.write(f"{label} {v:.6f}\n")


def read_scoreset(path: Union[str, Path]) -> ScoreSet:
    out = ScoreSet()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[0] not in ("genuine", "impostor"):
            raise ValueError(f"{path}:{lineno}: expected 'genuine|impostor score'")
        getattr(out, parts[0]).append(float(parts[1]))
    return out


def write_report(path: Union[str, Path], report: dict) -> None:
    with open(path, "w") as fh:
        for k, v in report.items():
            fh.write(f"{k} = {v:.6f}\n" if isinstance(v, float) else f"{k} = {v}\n")


def read_report(path: Union[str, Path]) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    return out


def write_roc_csv(path: Union[str, Path], roc: RocResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["far", "frr", "threshold"])
        for far, frr, t in zip(roc.far, roc.frr, roc.thresholds):
            w.writerow([f"{far:.6f}", f"{frr:.6f}", f"{t:.6f}" if np.isfinite(t) else str(t)])


def summarize(result: ProtocolResult, labels: Sequence[str], metric: str) -> dict:
    roc = roc_auc(result.scores)
    return {
        "metric": metric,
        "eer": eer(result.scores),
        "auc": roc.auc,
        "rank1_extra": result.rank1(labels),
        "genuine_pairs": len(result.scores.genuine),
        "impostor_pairs": len(result.scores.impostor),
        "gallery_size": len(result.gallery),
        "probe_size": len(result.probe),
    }

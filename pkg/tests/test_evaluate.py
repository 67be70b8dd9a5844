from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irisnet.codec import IrisTemplate
from irisnet.evaluate import (ProtocolSpec, ScoreSet, eer, protocol, read_scoreset, roc_auc,
                              run_protocol, split_gallery_probe, write_roc_csv, write_scoreset)


def sweep_oracle(gen, imp):
    """Brute-force EER: every observed threshold plus both extremes, then the
    first sign change of FAR - FRR, interpolated linearly."""
    pts = [(1.0, 0.0)]
    for t in sorted(set(gen) | set(imp)):
        far = sum(1 for s in imp if s >= t) / len(imp)
        frr = sum(1 for s in gen if s < t) / len(gen)
        pts.append((far, frr))
    pts.append((0.0, 1.0))
    for (f0, r0), (f1, r1) in zip(pts, pts[1:]):
        if f1 - r1 == 0:
            return f1
        if f1 - r1 < 0:
            lam = (f0 - r0) / ((f0 - r0) - (f1 - r1))
            return f0 + lam * (f1 - f0)


def pairwise_auc(gen, imp):
    wins = Fraction(0)
    for g in gen:
        for i in imp:
            wins += 1 if g > i else Fraction(1, 2) if g == i else 0
    return wins / (len(gen) * len(imp))


def test_perfect_separation():
    s = ScoreSet([1.0] * 10, [0.0] * 10)
    assert eer(s) == 0.0 and roc_auc(s).auc == 1.0
    assert roc_auc(ScoreSet(s.impostor, s.genuine)).auc == 0.0


def test_identical_lists_give_half():
    x = np.random.default_rng(0).random(500).tolist()
    assert abs(eer(ScoreSet(x, x)) - 0.5) <= 0.02


def test_empty_lists_fail():
    with pytest.raises(ValueError):
        eer(ScoreSet([], [1.0]))
    with pytest.raises(ValueError):
        roc_auc(ScoreSet([1.0], []))


def test_eer_matches_sweep_oracle():
    r = np.random.default_rng(1)
    for k in range(5):
        gen = (r.normal(1.0, 1.0, 500)).round(2 if k % 2 else 8).tolist()
        imp = (r.normal(0.0, 1.0, 500)).round(2 if k % 2 else 8).tolist()
        assert abs(eer(ScoreSet(gen, imp)) - sweep_oracle(gen, imp)) <= 1e-9


def test_auc_matches_pairwise_oracle():
    r = np.random.default_rng(2)
    for _ in range(5):
        gen = r.integers(0, 20, 120).astype(float).tolist()  # plenty of ties
        imp = r.integers(-5, 15, 90).astype(float).tolist()
        roc = roc_auc(ScoreSet(gen, imp))
        assert roc.auc_exact == pairwise_auc(gen, imp)
        assert abs(roc.auc - float(pairwise_auc(gen, imp))) <= 1e-9


def test_roc_points_cover_every_threshold():
    roc = roc_auc(ScoreSet([0.9, 0.8, 0.8], [0.1, 0.8]))
    assert len(roc.thresholds) == 3 + 2
    assert (roc.far[0], roc.tpr[0], roc.far[-1], roc.tpr[-1]) == (1.0, 1.0, 0.0, 0.0)
    assert (np.diff(roc.far) <= 0).all() and (np.diff(roc.tpr) <= 0).all()


scores = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=40)


@given(scores, scores)
@settings(max_examples=150, deadline=None)
def test_auc_swap_sums_to_one(g, i):
    assert roc_auc(ScoreSet(g, i)).auc_exact + roc_auc(ScoreSet(i, g)).auc_exact == 1


@given(scores, scores)
@settings(max_examples=150, deadline=None)
def test_eer_invariant_under_increasing_map(g, i):
    # strictly increasing on the observed values: cube of the rank, and an exact rescale
    ranks = {v: k for k, v in enumerate(sorted(set(g) | set(i)))}
    cube = lambda v: [float(ranks[x] ** 3) - 10.0 for x in v]  # noqa: E731
    base = eer(ScoreSet(g, i))
    assert eer(ScoreSet(cube(g), cube(i))) == base
    assert eer(ScoreSet([4 * x for x in g], [4 * x for x in i])) == base
    assert 0.0 <= base <= 1.0


def test_auc_above_half_alone_does_not_bound_eer():
    # counterexample to "AUC >= 0.5 implies EER <= 0.5": the ROC dips below chance
    s = ScoreSet([1.0, -1.0, -1.0], [0.0, 0.0, -2.0])
    assert roc_auc(s).auc_exact == Fraction(5, 9)
    assert eer(s) == pytest.approx(2 / 3)


@given(scores, scores)
@settings(max_examples=150, deadline=None)
def test_eer_at_most_half_when_roc_above_chance(g, i):
    s = ScoreSet(g, i)
    roc = roc_auc(s)
    if (roc.tpr >= roc.far).all():
        assert roc.auc >= 0.5
        assert eer(s) <= 0.5 + 1e-12


@given(scores, scores)
@settings(max_examples=150, deadline=None)
def test_swapping_labels_mirrors_eer(g, i):
    assert abs(eer(ScoreSet(g, i)) + eer(ScoreSet(i, g)) - 1) <= 1e-12


def templates(vectors, labels):
    return [IrisTemplate.from_features(v, lab, "left", sample=str(k))
            for k, (v, lab) in enumerate(zip(vectors, labels))]


def test_two_by_two_protocol():
    r = np.random.default_rng(3)
    ts = templates(r.standard_normal((4, 16)), ["a", "a", "b", "b"])
    s = run_protocol(ts, ProtocolSpec(0.5, seed=0))
    assert len(s.genuine) == 2 and len(s.impostor) == 2


def test_protocol_is_deterministic_and_disjoint():
    r = np.random.default_rng(4)
    labels = [f"s{i % 7}" for i in range(40)]
    ts = templates(r.standard_normal((40, 16)), labels)
    a, b = protocol(ts, ProtocolSpec(seed=5)), protocol(ts, ProtocolSpec(seed=5))
    assert a.scores == b.scores
    assert not set(a.gallery) & set(a.probe) and len(a.gallery) + len(a.probe) == 40
    assert protocol(ts, ProtocolSpec(seed=6)).gallery != a.gallery


@given(st.lists(st.integers(1, 6), min_size=2, max_size=8), st.integers(0, 1000),
       st.sampled_from([0.3, 0.5, 0.7]))
@settings(max_examples=60, deadline=None)
def test_genuine_count_closed_form(counts, seed, split):
    labels = [f"s{j}" for j, c in enumerate(counts) for _ in range(c)]
    if max(counts) < 2:
        return
    ts = templates(np.random.default_rng(seed).standard_normal((len(labels), 8)), labels)
    res = protocol(ts, ProtocolSpec(split, seed))
    expect_gen = expect_all = 0
    n_gal = sum(min(max(1, round(c * split)), max(1, c - 1)) for c in counts)
    for c in counts:
        k = min(max(1, round(c * split)), max(1, c - 1))
        expect_gen += k * (c - k)
    expect_all = (len(labels) - n_gal) * n_gal
    assert len(res.scores.genuine) == expect_gen
    assert len(res.scores.genuine) + len(res.scores.impostor) == expect_all


def test_constant_templates_give_half():
    ts = templates(np.ones((40, 8)), [f"s{i % 10}" for i in range(40)])
    s = run_protocol(ts)
    assert len(set(s.genuine + s.impostor)) == 1
    assert abs(eer(s) - 0.5) <= 0.02


def test_no_genuine_pairs():
    ts = templates(np.eye(3), ["a", "b", "c"])
    with pytest.raises(ValueError, match="genuine"):
        run_protocol(ts)


def test_hamming_scores_are_negated():
    r = np.random.default_rng(8)
    ts = [IrisTemplate.from_features(v, lab, "left", sample=str(k), binary=True)
          for k, (v, lab) in enumerate(zip(r.standard_normal((4, 64)), "aabb"))]
    s = run_protocol(ts)
    assert max(s.genuine + s.impostor) <= 0


def test_split_keeps_singletons_in_gallery():
    gal, prb = split_gallery_probe(["a", "b", "b"], ProtocolSpec())
    assert 0 in gal and len(prb) == 1


def test_scoreset_and_roc_files(tmp_path):
    s = ScoreSet([0.5, 0.25], [0.125])
    write_scoreset(tmp_path / "s.txt", s)
    assert read_scoreset(tmp_path / "s.txt") == s
    write_roc_csv(tmp_path / "roc.csv", roc_auc(s))
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "far,frr,threshold" and len(lines) == 1 + 5

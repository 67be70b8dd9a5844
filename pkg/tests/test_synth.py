import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irisnet.geometry import iou
from irisnet.synth import (IRIS, PUPIL, SyntheticIdentity, augment, hflip, make_identities,
                           polar_remap, polar_unmap, preprocess, scale, synth_eye, translate)


def test_same_seeds_bit_identical():
    ident = SyntheticIdentity.from_seed(3)
    a, b = synth_eye(ident, 11), synth_eye(SyntheticIdentity.from_seed(3), 11)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.mask.tobytes() == b.mask.tobytes()
    assert a.iris_box == b.iris_box and a.pupil_box == b.pupil_box


def test_containment_invariants_on_1000_samples():
    idents = make_identities(50) + make_identities(10, "VS", first_seed=500)
    for k in range(1000):
        s = synth_eye(idents[k % len(idents)], k, size=64)
        s.check()
        assert s.image.dtype == np.float32 and s.image.min() >= 0 and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, IRIS, PUPIL}


def test_vs_identity_has_three_channels():
    s = synth_eye(SyntheticIdentity.from_seed(1, "VS"), 0)
    assert s.image.shape == (3, 128, 128) and s.spectrum == "VS"


def test_bad_spectrum_rejected():
    with pytest.raises(ValueError):
        SyntheticIdentity.from_seed(1, "UV")


def test_degenerate_geometry_rejected():
    ident = SyntheticIdentity.from_seed(0)
    from dataclasses import replace
    with pytest.raises(ValueError):
        synth_eye(replace(ident, iris_radius=(0.6, 0.7)), 0)
    with pytest.raises(ValueError):
        synth_eye(replace(ident, pupil_ratio=(0.95, 0.97)), 0)


def _polar_values(sample, rho, phi):
    """Image values at normalised polar points, nearest pixel."""
    g = sample.geometry
    ang = phi + g["rotation"]
    # invert rho = (d_pupil - r_pupil) / (r_iris - r_pupil) along the ray from the pupil centre
    r = g["r_pupil"] + rho * (g["r_iris"] - g["r_pupil"])
    x = g["pcx"] + r * np.cos(ang)
    y = g["pcy"] + r * np.sin(ang)
    xi = np.clip(np.floor(x).astype(int), 0, sample.size[1] - 1)
    yi = np.clip(np.floor(y).astype(int), 0, sample.size[0] - 1)
    return sample.image[0, yi, xi].astype(np.float64), sample.mask[yi, xi] == IRIS


def test_identity_texture_dominates_pose_variation():
    r = np.random.default_rng(0)
    rho = r.uniform(0.15, 0.85, 400)
    phi = r.uniform(0, 2 * np.pi, 400)
    wins = 0
    for pair in range(100):
        a = SyntheticIdentity.from_seed(2 * pair)
        b = SyntheticIdentity.from_seed(2 * pair + 1)
        a1, a2, b1 = synth_eye(a, 1000 + pair), synth_eye(a, 2000 + pair), synth_eye(b, 1000 + pair)
        va1, m1 = _polar_values(a1, rho, phi)
        va2, m2 = _polar_values(a2, rho, phi)
        vb1, m3 = _polar_values(b1, rho, phi)
        keep = m1 & m2 & m3
        assert keep.sum() > 50
        intra = np.abs(va1 - va2)[keep].mean()
        inter = np.abs(va1 - vb1)[keep].mean()
        wins += inter > intra
    assert wins == 100


def test_embedder_augment_gives_eight():
    s = synth_eye(SyntheticIdentity.from_seed(2), 4, size=100)
    out = augment(s)
    assert len(out) == 8
    assert all(v.label == s.label and v.subject == s.subject for v in out)


def test_detector_augment_adds_flip():
    s = synth_eye(SyntheticIdentity.from_seed(2), 4, size=100)
    assert len(augment(s, "detector")) == 9


def test_augment_skips_out_of_frame_with_warning(caplog):
    s = synth_eye(SyntheticIdentity.from_seed(2), 4, size=100)
    with caplog.at_level(logging.WARNING):
        out = augment(s, shift=60)
    assert len(out) < 8
    assert any("skipped" in rec.message for rec in caplog.records)
    assert all(v.iris_box.inside_frame() for v in out)


def test_augmented_variants_keep_invariants():
    for k in range(20):
        s = synth_eye(SyntheticIdentity.from_seed(k), k, size=100)
        for v in augment(s, "detector"):
            v.check()


def test_flip_twice_is_identity():
    s = synth_eye(SyntheticIdentity.from_seed(5), 6)
    back = hflip(hflip(s))
    assert np.array_equal(back.image, s.image) and np.array_equal(back.mask, s.mask)
    assert abs(back.iris_box.cx - s.iris_box.cx) < 1e-12


def _horizontal_extent(mask):
    xs = np.nonzero(np.isin(mask, (IRIS, PUPIL)).any(axis=0))[0]
    return xs.max() - xs.min() + 1


@pytest.mark.parametrize("factor", [0.8, 0.9, 1.1])
def test_scaled_box_width_matches_rasterised_mask(factor):
    for k in range(10):
        s = synth_eye(SyntheticIdentity.from_seed(k), k, size=100)
        v = scale(s, factor)
        w0 = s.iris_box.w * 100
        # box algebra
        assert abs(v.iris_box.w * 100 - w0 * factor) < 1e-9
        # independent check: the rendered mask grows with the box, up to one pixel per edge
        assert abs(_horizontal_extent(v.mask) - _horizontal_extent(s.mask) * factor) <= 2.0
        assert abs(_horizontal_extent(v.mask) - v.iris_box.w * 100) <= 2.0


def test_translate_moves_mask_and_box_together():
    s = synth_eye(SyntheticIdentity.from_seed(1), 1, size=100)
    v = translate(s, 7, -5)
    assert np.array_equal(v.mask[10:90, 10:90], s.mask[15:95, 3:83])
    assert abs((v.iris_box.cx - s.iris_box.cx) * 100 - 7) < 1e-9
    assert abs((v.iris_box.cy - s.iris_box.cy) * 100 + 5) < 1e-9
    assert iou(v.iris_box, s.iris_box) < 1


def test_polar_remap_split_convention():
    strip = np.zeros((50, 200), np.float32)
    strip[:, 100:] = 1
    out = polar_remap(strip)
    assert out.shape == (100, 100) and out.size == strip.size
    assert (out[:50] == 0).all() and (out[50:] == 1).all()


def test_polar_remap_is_a_permutation():
    idx = np.arange(50 * 200).reshape(50, 200)
    out = polar_remap(idx)
    assert np.array_equal(np.sort(out.ravel()), idx.ravel())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_polar_round_trip_bit_exact(seed):
    strip = np.random.default_rng(seed).standard_normal((3, 50, 200)).astype(np.float32)
    back = polar_unmap(polar_remap(strip))
    assert back.tobytes() == strip.tobytes()


def test_polar_remap_wrong_extent():
    with pytest.raises(ValueError):
        polar_remap(np.zeros((50, 199)))
    with pytest.raises(ValueError):
        polar_unmap(np.zeros((100, 50)))


def test_preprocess_mean_image_gives_zero():
    means = [0.3, 0.5, 0.7]
    img = np.broadcast_to(np.array(means, np.float32)[:, None, None], (3, 20, 30))
    assert np.abs(preprocess(img, means, (10, 10))).max() < 1e-7


def test_preprocess_zero_means_identity():
    img = np.random.default_rng(0).random((1, 16, 16)).astype(np.float32)
    assert np.array_equal(preprocess(img, [0.0]), img)


def test_preprocess_resize_keeps_constant():
    img = np.full((1, 37, 53), 0.25, np.float32)
    out = preprocess(img, [0.0], (100, 100))
    assert out.shape == (1, 100, 100)
    np.testing.assert_allclose(out, 0.25, atol=1e-7)


def test_preprocess_channel_mismatch():
    with pytest.raises(ValueError):
        preprocess(np.zeros((3, 8, 8)), [0.5])

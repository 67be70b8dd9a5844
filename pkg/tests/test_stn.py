import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irisnet import ops
from irisnet.stn import (IDENTITY_THETA, STModuleConfig, SpatialTransformer, affine_grid,
                         bilinear_sample, st_apply)
from irisnet.tensor import Tensor
from conftest import gradient_error


def norm_coords(h, w):
    xs = np.linspace(-1, 1, w)
    ys = np.linspace(-1, 1, h)
    return np.meshgrid(xs, ys)


def test_identity_grid_equals_output_coordinates():
    g = affine_grid(IDENTITY_THETA, 5, 7).data
    xx, yy = norm_coords(5, 7)
    np.testing.assert_array_equal(g[..., 0], xx.astype(np.float32))
    np.testing.assert_array_equal(g[..., 1], yy.astype(np.float32))


def test_translation_theta():
    g = affine_grid(np.array([1, 0, 0.5, 0, 1, 0]), 4, 6).data
    xx, yy = norm_coords(4, 6)
    np.testing.assert_allclose(g[..., 0], xx + 0.5, atol=1e-7)
    np.testing.assert_allclose(g[..., 1], yy, atol=1e-7)


def test_scaling_theta_hand_evaluated():
    theta = np.array([0.5, 0, 0, 0, 0.5, 0])
    g = affine_grid(theta, 4, 4).data
    pts = [-1, -1 / 3, 1 / 3, 1]
    for i, yo in enumerate(pts):
        for j, xo in enumerate(pts):
            xin = 0.5 * xo + 0 * yo + 0
            yin = 0 * xo + 0.5 * yo + 0
            assert abs(g[i, j, 0] - xin) < 1e-7 and abs(g[i, j, 1] - yin) < 1e-7


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-2, 2), st.floats(-2, 2))
def test_affine_grid_is_linear_in_theta(seed, a, b):
    r = np.random.default_rng(seed)
    t1, t2 = r.standard_normal(6), r.standard_normal(6)
    g = affine_grid(a * t1 + b * t2, 3, 5).data
    expected = a * affine_grid(t1, 3, 5).data + b * affine_grid(t2, 3, 5).data
    np.testing.assert_allclose(g, expected, atol=1e-4)


def test_bilinear_identity(rng):
    x = rng.standard_normal((2, 3, 9, 11)).astype(np.float32)
    grid = affine_grid(np.tile(IDENTITY_THETA, (2, 1)), 9, 11)
    np.testing.assert_allclose(bilinear_sample(Tensor(x), grid).data, x, atol=1e-5)


def test_bilinear_exact_pixel_centres():
    x = np.arange(20, dtype=np.float32).reshape(1, 1, 4, 5)
    # sample pixel (row 2, col 3) and (row 0, col 4)
    coords = np.array([[[[3 / 4 * 2 - 1, 2 / 3 * 2 - 1], [1.0, -1.0]]]], dtype=np.float32)
    y = bilinear_sample(Tensor(x), Tensor(coords)).data
    assert y[0, 0, 0, 0] == x[0, 0, 2, 3]
    assert y[0, 0, 0, 1] == x[0, 0, 0, 4]


def test_bilinear_outside_reads_zero():
    x = np.ones((1, 1, 4, 4), dtype=np.float32)
    coords = np.array([[[[3.0, 0.0], [0.0, -5.0]]]], dtype=np.float32)
    np.testing.assert_array_equal(bilinear_sample(Tensor(x), Tensor(coords)).data, 0)


def smooth_theta(r, n, h_in, w_in, h_out, w_out, margin=0.05):
    """Random near-identity theta whose sample points avoid pixel-cell borders,
    where bilinear interpolation has kinks."""
    while True:
        theta = (np.tile(IDENTITY_THETA, (n, 1)) + 0.15 * r.standard_normal((n, 6))).astype(np.float32)
        g = affine_grid(theta, h_out, w_out).data.astype(np.float64)
        px = (g[..., 0] + 1) / 2 * (w_in - 1)
        py = (g[..., 1] + 1) / 2 * (h_in - 1)
        frac = np.concatenate([px.ravel() % 1, py.ravel() % 1])
        if np.min(np.minimum(frac, 1 - frac)) > margin:
            return theta


def test_bilinear_gradients_input_and_theta():
    for seed in range(5):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, 2, 6, 7)).astype(np.float32)
        theta = smooth_theta(r, 2, 6, 7, 5, 6)

        def f(x, theta):
            return bilinear_sample(x, affine_grid(theta, 5, 6))

        errs = gradient_error(f, [x, theta], seed=seed, eps=1e-3)
        assert max(errs) < 1e-3, errs


def test_translate_and_back_restores_interior(rng):
    h = w = 12
    x = rng.standard_normal((1, 1, h, w)).astype(np.float32)
    t = 2 * 2 / (w - 1)  # two pixels
    fwd = bilinear_sample(Tensor(x), affine_grid(np.array([[1, 0, t, 0, 1, 0]]), h, w))
    back = bilinear_sample(fwd, affine_grid(np.array([[1, 0, -t, 0, 1, 0]]), h, w))
    np.testing.assert_allclose(back.data[..., 2:-2], x[..., 2:-2], atol=1e-3)


def test_st_module_identity_at_init(rng):
    cfg = STModuleConfig.default(2, (20, 24))
    st_mod = SpatialTransformer(cfg, np.random.default_rng(0))
    x = rng.standard_normal((3, 2, 20, 24)).astype(np.float32)
    np.testing.assert_allclose(st_apply(Tensor(x), st_mod).data, x, atol=1e-4)


def test_st_same_transform_on_all_channels(rng):
    cfg = STModuleConfig.default(2, (16, 16))
    st_mod = SpatialTransformer(cfg, np.random.default_rng(0))
    st_mod.head.bias.data[:] = [0.9, 0.1, 0.2, -0.1, 1.1, -0.15]
    base = rng.standard_normal((16, 16)).astype(np.float32)
    x = np.stack([base, 3 * base])[None]
    y = st_mod(Tensor(x)).data
    np.testing.assert_allclose(y[0, 1], 3 * y[0, 0], atol=1e-5)


def test_st_locnet_bias_gradient_matches_fd(rng):
    cfg = STModuleConfig.default(1, (12, 12))
    st_mod = SpatialTransformer(cfg, np.random.default_rng(1))
    x = rng.standard_normal((1, 1, 12, 12)).astype(np.float32)
    target = np.roll(x, 2, axis=3)
    st_mod.head.bias.data[:] = smooth_theta(np.random.default_rng(5), 1, 12, 12, 12, 12, margin=0.1)[0]

    def loss():
        d = ops.sub(st_mod(Tensor(x)), Tensor(target))
        return ops.sum(ops.square(d))

    st_mod.zero_grad()
    loss().backward()
    analytic = st_mod.head.bias.grad.astype(np.float64)
    assert np.abs(analytic).max() > 0
    eps = 1e-3
    num = np.zeros(6)
    for i in range(6):
        orig = st_mod.head.bias.data[i]
        st_mod.head.bias.data[i] = orig + eps
        up = float(loss().data)
        st_mod.head.bias.data[i] = orig - eps
        down = float(loss().data)
        st_mod.head.bias.data[i] = orig
        num[i] = (up - down) / (2 * eps)
    assert np.abs(analytic - num).max() / np.abs(num).max() < 1e-3


def test_st_wrong_head_width_fails():
    st_mod = SpatialTransformer(STModuleConfig.default(1, (8, 8)))
    from irisnet import nn
    st_mod.head = nn.Linear(st_mod.head.weight.shape[1], 5)
    with pytest.raises(ValueError):
        st_mod(Tensor(np.zeros((1, 1, 8, 8))))

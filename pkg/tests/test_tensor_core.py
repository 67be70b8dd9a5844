import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irisnet import nn, ops
from irisnet.tensor import Graph, Tensor, backward, no_grad
from conftest import gradient_error


# --- independent oracles ---------------------------------------------------

def conv_oracle(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oc]
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[bi, ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    out[bi, oc, i, j] = acc
    return out


def maxpool_oracle(x, k, s):
    n, c, h, w = x.shape
    ho, wo = (h - k) // s + 1, (w - k) // s + 1
    out = np.zeros((n, c, ho, wo))
    idx = np.zeros((n, c, ho, wo), dtype=int)
    for a in range(n):
        for b in range(c):
            for i in range(ho):
                for j in range(wo):
                    best, pos = -np.inf, -1
                    for u in range(k):
                        for v in range(k):
                            r, q = i * s + u, j * s + v
                            if x[a, b, r, q] > best:
                                best, pos = x[a, b, r, q], r * w + q
                    out[a, b, i, j], idx[a, b, i, j] = best, pos
    return out, idx


# --- conv2d ----------------------------------------------------------------

def test_conv_all_ones_center_is_nine():
    y = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), None, 1, 1)
    assert y.shape == (1, 1, 3, 3)
    assert y.data[0, 0, 1, 1] == 9


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 6)).astype(np.float32)
    y = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data, x)


def test_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    y = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1)
    np.testing.assert_allclose(y.data, conv_oracle(x, w, b, 1, 1), atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 8),
       st.integers(1, 8), st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 2),
       st.integers(0, 2**31 - 1))
def test_conv_oracle_property(n, c, o, h, w, k, stride, pad, seed):
    if h + 2 * pad < k or w + 2 * pad < k:
        return
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, w)).astype(np.float32)
    wt = r.standard_normal((o, c, k, k)).astype(np.float32)
    b = r.standard_normal(o).astype(np.float32)
    y = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad)
    np.testing.assert_allclose(y.data, conv_oracle(x, wt, b, stride, pad), atol=1e-5)


def test_conv_output_size_formula():
    y = ops.conv2d(Tensor(np.zeros((1, 3, 17, 12))), Tensor(np.zeros((4, 3, 7, 7))), None, 2, 1)
    assert y.shape == (1, 4, (17 + 2 - 7) // 2 + 1, (12 + 2 - 7) // 2 + 1)


def test_conv_channel_mismatch_names_dimension():
    with pytest.raises(ValueError, match="channels"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


# --- pooling ---------------------------------------------------------------

def test_maxpool_single_window():
    y, pi = ops.maxpool2d(Tensor(np.array([[[[1, 2], [3, 4]]]])), 2, 2)
    assert y.data.item() == 4
    assert pi.indices.item() == 1 * 2 + 1


def test_maxpool_constant_ties_go_to_first():
    _, pi = ops.maxpool2d(Tensor(np.full((1, 1, 4, 6), 7.0)), 2, 2)
    expected = np.array([[0, 2, 4], [12, 14, 16]])
    np.testing.assert_array_equal(pi.indices[0, 0], expected)
    assert pi.window_violations() == 0


def test_maxpool_matches_window_scan(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    y, pi = ops.maxpool2d(Tensor(x), 2, 2)
    out, idx = maxpool_oracle(x, 2, 2)
    np.testing.assert_array_equal(y.data, out)
    np.testing.assert_array_equal(pi.indices, idx)


def test_maxpool_ceil_mode_25_to_13(rng):
    x = rng.standard_normal((1, 2, 25, 25)).astype(np.float32)
    y, pi = ops.maxpool2d(Tensor(x), 2, 2, ceil_mode=True)
    assert y.shape == (1, 2, 13, 13)
    assert pi.input_hw == (25, 25)
    assert pi.window_violations() == 0
    # last row/column windows are 1-wide
    np.testing.assert_array_equal(y.data[0, :, 12, 12], x[0, :, 24, 24])


def test_maxpool_window_too_large():
    with pytest.raises(ValueError):
        ops.maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 3, 1)


def test_unpool_scatter_semantics(rng):
    x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
    y, pi = ops.maxpool2d(Tensor(x), 2, 2)
    u = ops.unpool2d(y, pi)
    assert u.shape == x.shape
    assert np.isclose(u.data.sum(), y.data.sum(), atol=1e-5)
    nz = u.data != 0
    np.testing.assert_array_equal(u.data[nz], x[nz])
    assert nz.sum() == y.size


def test_unpool_ceil_25_roundtrip_shape(rng):
    y13 = Tensor(rng.standard_normal((1, 4, 13, 13)))
    _, pi = ops.maxpool2d(Tensor(rng.standard_normal((1, 4, 25, 25))), 2, 2, ceil_mode=True)
    assert ops.unpool2d(y13, pi).shape == (1, 4, 25, 25)


def test_unpool_matches_explicit_scatter(rng):
    x = rng.standard_normal((2, 2, 5, 5)).astype(np.float32)
    y, pi = ops.maxpool2d(Tensor(x), 2, 2, ceil_mode=True)
    u = ops.unpool2d(y, pi).data
    oracle = np.zeros_like(x)
    for a in range(2):
        for b in range(2):
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    r, c = divmod(int(pi.indices[a, b, i, j]), 5)
                    oracle[a, b, r, c] = y.data[a, b, i, j]
    np.testing.assert_array_equal(u, oracle)


def test_unpool_rejects_corrupt_indices(rng):
    y, pi = ops.maxpool2d(Tensor(rng.standard_normal((1, 1, 4, 4))), 2, 2)
    pi.indices[0, 0, 0, 0] = 99
    with pytest.raises(ValueError):
        ops.unpool2d(y, pi)


def test_avgpool_examples(rng):
    assert ops.avgpool2d(Tensor(np.full((1, 1, 4, 4), 2.5)), 2).data.tolist() == [[[[2.5, 2.5], [2.5, 2.5]]]]
    assert ops.avgpool2d(Tensor(np.array([[[[0, 2], [4, 6]]]])), 2).data.item() == 3
    x = rng.standard_normal((1, 2, 7, 7)).astype(np.float32)
    y = ops.avgpool2d(Tensor(x), 3, 2).data
    for i in range(3):
        for j in range(3):
            np.testing.assert_allclose(y[:, :, i, j], x[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3].mean(axis=(2, 3)), atol=1e-6)


# --- batch norm ------------------------------------------------------------

def test_batchnorm_train_normalises(rng):
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    state = ops.BatchNormState()
    y = ops.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, train=True)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-4)
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1, atol=1e-3)
    assert state.initialized


def test_batchnorm_infer_uses_running_state():
    state = ops.BatchNormState(np.full(2, 5.0, np.float32), np.ones(2, np.float32))
    y = ops.batchnorm2d(Tensor(np.full((1, 2, 3, 3), 5.0)), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                        state, train=False)
    np.testing.assert_allclose(y.data, 0, atol=1e-6)


def test_batchnorm_infer_uninitialised_fails():
    with pytest.raises(RuntimeError):
        ops.batchnorm2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                        ops.BatchNormState(), train=False)


def test_batchnorm_running_momentum():
    state = ops.BatchNormState(np.zeros(1, np.float32), np.ones(1, np.float32))
    x = np.arange(8, dtype=np.float32).reshape(2, 1, 2, 2)
    ops.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, True, momentum=0.1)
    assert np.isclose(state.running_mean[0], 0.1 * x.mean())
    assert np.isclose(state.running_var[0], 0.9 + 0.1 * x.var(ddof=1), rtol=1e-6)


# --- softmax cross-entropy -------------------------------------------------

def test_xent_uniform_logits_is_log_c():
    loss = ops.softmax_xent(Tensor(np.zeros((3, 5))), [0, 2, 4])
    assert math.isclose(loss.item(), math.log(5), rel_tol=1e-6)


def test_xent_saturated():
    logits = np.zeros((2, 4))
    logits[[0, 1], [1, 3]] = 20.0
    assert ops.softmax_xent(Tensor(logits), [1, 3]).item() < 1e-6


def test_xent_gradient_is_softmax_minus_onehot(rng):
    logits = rng.standard_normal((4, 3)).astype(np.float32)
    labels = np.array([0, 2, 1, 1])
    t = Tensor(logits, requires_grad=True)
    ops.softmax_xent(t, labels).backward()
    expected = ops.softmax(logits.astype(np.float64))
    expected[np.arange(4), labels] -= 1
    np.testing.assert_allclose(t.grad, expected / 4, atol=1e-6)


def test_xent_label_out_of_range():
    with pytest.raises(ValueError):
        ops.softmax_xent(Tensor(np.zeros((2, 3))), [0, 3])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one_and_loss_nonneg(seed):
    r = np.random.default_rng(seed)
    z = (r.standard_normal((5, 7)) * 10).astype(np.float32)
    np.testing.assert_allclose(ops.softmax(z).sum(axis=1), 1, atol=1e-6)
    assert ops.softmax_xent(Tensor(z), r.integers(0, 7, 5)).item() >= 0


# --- backward --------------------------------------------------------------

def test_backward_power_rule():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == 6


def test_backward_accumulates_branches():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x + x).backward()
    assert x.grad == 2


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * x)


def test_graph_records_in_insertion_order():
    x = Tensor(np.ones((1, 1, 4, 4)), requires_grad=True)
    y = ops.relu(x)
    z, _ = ops.maxpool2d(y, 2)
    loss = ops.sum(z)
    g = Graph.trace(loss)
    assert g.kinds() == ["relu", "maxpool2d", "sum"]
    seen = set()
    for rec in g:
        for t in rec.inputs:
            assert t.node is None or t.node.id in seen
        seen.add(rec.id)


def test_composite_graph_finite_differences(rng):
    x = rng.standard_normal((2, 2, 6, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32) * 0.5
    b = rng.standard_normal(3).astype(np.float32) * 0.1
    lw = rng.standard_normal((4, 27)).astype(np.float32) * 0.3
    lb = rng.standard_normal(4).astype(np.float32)

    def f(x, w, b, lw, lb):
        h = ops.relu(ops.conv2d(x, w, b, 1, 1))
        h, _ = ops.maxpool2d(h, 2)
        return ops.linear(ops.flatten(h), lw, lb)

    errs = gradient_error(f, [x, w, b, lw, lb], seed=3)
    assert max(errs) < 1e-3, errs


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * x
    assert y.node is None and not y.requires_grad


# --- dropout ---------------------------------------------------------------

def test_dropout_infer_identity():
    x = Tensor(np.arange(10.0))
    assert ops.dropout(x, 0.5, False, np.random.default_rng(0)) is x


def test_dropout_train_rescales_survivors():
    x = Tensor(np.ones(10000))
    y = ops.dropout(x, 0.5, True, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs((y == 0).mean() - 0.5) < 0.02


# --- module plumbing -------------------------------------------------------

def test_module_state_dict_roundtrip():
    r = np.random.default_rng(0)
    net = nn.Sequential(nn.Conv2d(1, 2, 3, 1, 1, rng=r), nn.BatchNorm2d(2), nn.ReLU())
    net(Tensor(r.standard_normal((2, 1, 4, 4))))
    state = {k: v.copy() for k, v in net.state_dict().items()}
    assert set(state) == {"layers.0.weight", "layers.0.bias", "layers.1.gamma", "layers.1.beta",
                          "layers.1.running_mean", "layers.1.running_var"}
    other = nn.Sequential(nn.Conv2d(1, 2, 3, 1, 1, rng=np.random.default_rng(9)), nn.BatchNorm2d(2), nn.ReLU())
    other.load_state_dict(state)
    for k, v in other.state_dict().items():
        np.testing.assert_array_equal(v, state[k])


def test_sgd_step_descends():
    w = Tensor(np.array([3.0]), requires_grad=True)
    opt = nn.SGD([w], lr=0.1, momentum=0.0)
    for _ in range(50):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
    assert abs(w.data[0]) < 1e-3


def test_plateau_schedule_drops_three_times_then_stops():
    opt = nn.SGD([], lr=1.0)
    sched = nn.PlateauSchedule(opt, patience=2)
    for _ in range(20):
        sched.update(1.0)
    assert sched.drops == 3 and sched.stop
    assert math.isclose(opt.lr, 1e-3)

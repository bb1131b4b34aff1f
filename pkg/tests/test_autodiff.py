import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcdrn import autodiff as F
from fcdrn.autodiff import NumericalError, Tape, Tensor, check_gradients, conv2d_reference, no_grad

N_SHAPES = 20
TOL = 1e-4


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def distinct(rng, shape, spread=1.0):
    # well-separated values so max/relu kinks sit far from the probe step
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + 0.5 - n / 2) * (spread / n) * 4
    vals = vals + np.sign(vals) * 0.05
    return vals.reshape(shape)


# tensor and tape ----------------------------------------------------------------------

def test_tensor_defaults_to_float32():
    t = Tensor([[1, 2], [3, 4]])
    assert t.dtype == np.float32
    assert t.grad is None and t.is_leaf


def test_backward_of_sum_is_ones():
    x = leaf(np.arange(6.0).reshape(1, 1, 2, 3))
    F.backward(F.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((1, 1, 2, 3)))


def test_two_consumers_accumulate():
    x = leaf(np.ones((1, 2, 2, 2)))
    F.backward(F.tensor_sum(F.add(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * np.ones((1, 2, 2, 2)))


def test_backward_on_detached_raises():
    x = Tensor(np.ones((1, 1, 2, 2)))
    with pytest.raises(RuntimeError):
        F.backward(F.tensor_sum(x))
    with pytest.raises(RuntimeError):
        F.backward(F.tensor_sum(leaf(np.ones((1, 1, 2, 2)))).detach())


def test_non_scalar_backward_needs_grad():
    x = leaf(np.ones((1, 1, 2, 2)))
    with pytest.raises(RuntimeError):
        F.backward(F.relu(x))


def test_tape_visits_each_node_once_and_is_cleared():
    x = leaf(np.ones((1, 1, 2, 2)))
    y = F.relu(x)
    loss = F.tensor_sum(F.add(y, y))
    tape = Tape(loss)
    assert len(tape) == len({id(n) for n in tape.nodes}) == 4
    F.backward(loss)
    assert loss._backward is None and y._backward is None


def test_no_grad_records_nothing():
    x = leaf(np.ones((1, 1, 2, 2)))
    with no_grad():
        y = F.relu(x)
    assert not y.requires_grad and y.is_leaf


def test_non_finite_result_raises():
    x = Tensor(np.full((1, 1, 2, 2), np.inf))
    with pytest.raises(NumericalError):
        F.relu(x)


# conv2d -----------------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_ones_interior_and_corner():
    out = F.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.data[0, 0, 2, 2] == 9.0
    assert out.data[0, 0, 0, 0] == 4.0
    assert out.data[0, 0, 0, 2] == 6.0
    np.testing.assert_array_equal(out.data, conv2d_reference(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3))))


def test_conv_dilated_same_size():
    out = F.conv2d(Tensor(np.ones((1, 1, 7, 7))), Tensor(np.ones((1, 1, 3, 3))), dilation=2)
    assert out.shape == (1, 1, 7, 7)


def test_conv_strided_size():
    out = F.conv2d(Tensor(np.ones((1, 2, 81, 81))), Tensor(np.ones((2, 2, 3, 3))), stride=2, padding=1)
    assert out.shape[2:] == (41, 41)


def test_conv_errors():
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        F.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), dilation=4, padding=0)


@pytest.mark.parametrize("seed", range(12))
def test_conv_matches_reference(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    dil = 1 if stride > 1 else int(rng.choice([1, 2, 3]))
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(6, 11)),
                             int(rng.integers(6, 11))))
    w = rng.standard_normal((int(rng.integers(1, 4)), x.shape[1], k, k))
    b = rng.standard_normal(w.shape[0])
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, dil)
    np.testing.assert_allclose(out.data, conv2d_reference(x, w, b, stride, dil), rtol=1e-12, atol=1e-12)


def test_conv_grouped_taps_match(monkeypatch):
    from fcdrn.autodiff import conv

    rng = np.random.default_rng(5)
    x = leaf(rng.standard_normal((2, 3, 9, 9)))
    w = leaf(rng.standard_normal((4, 3, 3, 3)))
    full = F.conv2d(x, w, dilation=2)
    F.backward(full, np.ones(full.shape))
    gx, gw = x.grad.copy(), w.grad.copy()
    x.grad = w.grad = None
    monkeypatch.setattr(conv, "MAX_COL_ELEMENTS", 3 * 2 * 81)  # one tap per group
    part = F.conv2d(x, w, dilation=2)
    F.backward(part, np.ones(part.shape))
    np.testing.assert_allclose(part.data, full.data, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(x.grad, gx, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(w.grad, gw, rtol=1e-12, atol=1e-12)


@given(k=st.sampled_from([1, 3, 5]), d=st.integers(1, 4), h=st.integers(9, 14), w=st.integers(9, 14))
def test_same_padding_preserves_size(k, d, h, w):
    out = F.conv2d(Tensor(np.ones((1, 1, h, w))), Tensor(np.ones((1, 1, k, k))), dilation=d)
    assert out.shape == (1, 1, h, w)


# maxpool / upsample -----------------------------------------------------------------

def test_maxpool_examples():
    out = F.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])
    assert F.maxpool2d(Tensor(np.ones((1, 1, 5, 5)))).shape == (1, 1, 2, 2)
    with pytest.raises(ValueError):
        F.maxpool2d(Tensor(np.ones((1, 1, 1, 4))))


def window_scan(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2))
    for i in range(h // 2):
        for j in range(w // 2):
            out[:, :, i, j] = x[:, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max(axis=(2, 3))
    return out


@given(h=st.integers(2, 6), w=st.integers(2, 6), seed=st.integers(0, 10_000))
def test_maxpool_window_scan(h, w, seed):
    x = np.random.default_rng(seed).standard_normal((1, 2, h, w))
    np.testing.assert_array_equal(F.maxpool2d(Tensor(x)).data, window_scan(x))


def test_maxpool_routes_gradient_to_argmax():
    x = leaf([[[[1.0, 5.0], [3.0, 2.0]]]])
    F.backward(F.tensor_sum(F.maxpool2d(x)))
    np.testing.assert_array_equal(x.grad, [[[[0, 1], [0, 0]]]])


def test_upsample_examples():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    np.testing.assert_array_equal(F.upsample_nearest(x, 4, 4).data[0, 0],
                                  [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    np.testing.assert_array_equal(F.upsample_nearest(x, 3, 3).data[0, 0], [[1, 1, 2], [1, 1, 2], [3, 3, 4]])
    np.testing.assert_array_equal(F.upsample_nearest(x, 2, 2).data, x.data)
    with pytest.raises(ValueError):
        F.upsample_nearest(x, 1, 2)


@given(h=st.integers(1, 8), w=st.integers(1, 8), th=st.integers(0, 9), tw=st.integers(0, 9))
def test_upsample_index_map(h, w, th, tw):
    th, tw = h + th, w + tw
    x = np.arange(h * w, dtype=np.float64).reshape(1, 1, h, w)
    out = F.upsample_nearest(Tensor(x), th, tw).data[0, 0]
    for y in range(th):
        for xx in range(tw):
            assert out[y, xx] == x[0, 0, (y * h) // th, (xx * w) // tw]


# batchnorm / dropout / concat / loss ---------------------------------------------------

def test_batchnorm_train_statistics():
    x = np.random.default_rng(0).standard_normal((4, 3, 2, 2)) * 3 + 1
    rm, rv = np.zeros(3), np.ones(3)
    out = F.batchnorm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, train=True).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3
    # two-pass oracle for the batch statistics and the running update
    m = x.shape[0] * 4
    mean = x.sum(axis=(0, 2, 3)) / m
    var = ((x - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3)) / m
    np.testing.assert_allclose(rm, 0.1 * mean, rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * var * m / (m - 1), rtol=1e-12)


def test_batchnorm_fixed_point_and_eval():
    x = np.random.default_rng(1).standard_normal((8, 2, 4, 4))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = F.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True).data
    np.testing.assert_allclose(out, x, atol=1e-4)
    ev = F.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.full(2, 1.0), np.full(2, 4.0), False)
    np.testing.assert_allclose(ev.data, (x - 1.0) / np.sqrt(4.0 + 1e-5))


def test_batchnorm_constant_channel_is_finite():
    out = F.batchnorm(Tensor(np.ones((2, 1, 3, 3))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                      np.zeros(1), np.ones(1), True)
    assert np.isfinite(out.data).all()


def test_dropout_modes():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    np.testing.assert_array_equal(F.dropout(x, 0.0, True, 0).data, x.data)
    np.testing.assert_array_equal(F.dropout(x, 0.5, False, 0).data, x.data)
    out = F.dropout(x, 0.25, True, 1).data
    kept = out != 0
    np.testing.assert_allclose(out[kept], x.data[kept] / 0.75)
    ch = F.dropout(x, 0.5, True, 2, channelwise=True).data
    for n in range(2):
        for c in range(3):
            assert (ch[n, c] == 0).all() or (ch[n, c] != 0).all()
    with pytest.raises(ValueError):
        F.dropout(x, 1.0, True, 0)


def test_dropout_expectation():
    x = np.random.default_rng(3).uniform(0.5, 1.5, size=(1, 1, 8, 8))
    rng = np.random.default_rng(7)
    trials = 4000
    means = np.array([F.dropout(Tensor(x), 0.2, True, rng).data.mean() for _ in range(trials)])
    # per-trial std of the mean of 64 independent inverted-dropout draws
    sigma = np.sqrt((x ** 2).mean() * 0.2 / 0.8 / 64) / math.sqrt(trials)
    assert abs(means.mean() - x.mean()) < 3 * sigma


def test_concat_and_slice():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 5, 4, 4))
    out = F.concat_channels([Tensor(a), Tensor(b)]).data
    assert out.shape == (2, 8, 4, 4)
    np.testing.assert_array_equal(out[:, :3], a)
    np.testing.assert_array_equal(out[:, 3:], b)
    with pytest.raises(ValueError):
        F.concat_channels([Tensor(a), Tensor(np.ones((2, 1, 3, 4)))])
    with pytest.raises(ValueError):
        F.add(Tensor(a), Tensor(b))


def test_cross_entropy_uniform_is_log_k():
    loss = F.softmax_cross_entropy(Tensor(np.zeros((1, 11, 3, 3))), np.zeros((1, 3, 3), int))
    assert abs(float(loss.data) - math.log(11)) < 1e-6
    assert abs(math.log(11) - 2.3979) < 1e-4


def test_cross_entropy_large_margin_goes_to_zero():
    z = np.zeros((1, 3, 1, 1))
    z[0, 1] = 1e3
    assert float(F.softmax_cross_entropy(Tensor(z), np.ones((1, 1, 1), int)).data) < 1e-12


def test_cross_entropy_per_pixel_oracle():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((1, 3, 2, 2))
    t = rng.integers(0, 3, (1, 2, 2))
    want = 0.0
    for y in range(2):
        for x in range(2):
            col = z[0, :, y, x]
            want += -(col[t[0, y, x]] - math.log(sum(math.exp(v) for v in col)))
    got = float(F.softmax_cross_entropy(Tensor(z), t).data)
    assert abs(got - want / 4) < 1e-12


def test_cross_entropy_void_masking():
    rng = np.random.default_rng(5)
    z = leaf(rng.standard_normal((1, 3, 2, 2)))
    t = np.array([[[0, 11], [2, 11]]])
    loss = F.softmax_cross_entropy(z, t, void_index=11)
    ref = F.softmax_cross_entropy(Tensor(z.data[:, :, :, :1]), t[:, :, :1])
    assert abs(float(loss.data) - float(ref.data)) < 1e-12
    F.backward(loss)
    assert (z.grad[:, :, :, 1] == 0).all()
    with pytest.raises(ValueError):
        F.softmax_cross_entropy(Tensor(z.data), np.array([[[0, 12], [2, 1]]]), void_index=11)


# gradient suite ---------------------------------------------------------------------

def _shape(rng, c_lo=1, c_hi=3, s_lo=2, s_hi=6):
    return (int(rng.integers(1, 3)), int(rng.integers(c_lo, c_hi + 1)),
            int(rng.integers(s_lo, s_hi + 1)), int(rng.integers(s_lo, s_hi + 1)))


def _conv_case(rng):
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    dil = 1 if stride > 1 else int(rng.choice([1, 2]))
    x = leaf(rng.standard_normal(_shape(rng, s_lo=4, s_hi=7)))
    w = leaf(rng.standard_normal((int(rng.integers(1, 4)), x.shape[1], k, k)))
    b = leaf(rng.standard_normal(w.shape[0]))
    return (lambda x, w, b: F.conv2d(x, w, b, stride, dil)), [x, w, b]


def _bn_case(rng, train=True):
    x = leaf(rng.standard_normal(_shape(rng)) * 2 + 0.5)
    c = x.shape[1]
    g, b = leaf(rng.uniform(0.5, 1.5, c)), leaf(rng.standard_normal(c))
    rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2, c)
    return (lambda x, g, b: F.batchnorm(x, g, b, rm.copy(), rv.copy(), train)), [x, g, b]


def _dropout_case(rng):
    x = leaf(rng.standard_normal(_shape(rng)))
    seed = int(rng.integers(1 << 30))
    return (lambda x: F.dropout(x, 0.3, True, seed)), [x]


def _xent_hard(rng):
    shape = _shape(rng, 2, 5)
    z = leaf(rng.standard_normal(shape))
    t = rng.integers(0, shape[1], (shape[0],) + shape[2:])
    t[rng.random(t.shape) < 0.2] = 11
    if (t == 11).all():
        t.flat[0] = 0
    return (lambda z: F.softmax_cross_entropy(z, t, 11)), [z]


def _xent_soft(rng):
    shape = _shape(rng, 2, 5)
    z = leaf(rng.standard_normal(shape))
    t = rng.dirichlet(np.ones(shape[1]), size=(shape[0],) + shape[2:]).transpose(0, 3, 1, 2)
    return (lambda z: F.softmax_cross_entropy(z, t)), [z]


def _concat_case(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    parts = [leaf(rng.standard_normal((n, int(rng.integers(1, 4)), h, w))) for _ in range(int(rng.integers(2, 4)))]
    return (lambda *xs: F.concat_channels(list(xs))), parts


def _upsample_case(rng):
    x = leaf(rng.standard_normal(_shape(rng, s_lo=1, s_hi=4)))
    th, tw = x.shape[2] + int(rng.integers(0, 5)), x.shape[3] + int(rng.integers(0, 5))
    return (lambda x: F.upsample_nearest(x, th, tw)), [x]


def _add_case(rng):
    shape = _shape(rng)
    return F.add, [leaf(rng.standard_normal(shape)), leaf(rng.standard_normal(shape))]


GRAD_CASES = {
    "conv2d": _conv_case,
    "maxpool2d": lambda rng: (F.maxpool2d, [leaf(distinct(rng, _shape(rng)))]),
    "upsample_nearest": _upsample_case,
    "batchnorm_train": _bn_case,
    "batchnorm_eval": lambda rng: _bn_case(rng, False),
    "relu": lambda rng: (F.relu, [leaf(distinct(rng, _shape(rng)))]),
    "dropout": _dropout_case,
    "add": _add_case,
    "concat_channels": _concat_case,
    "scale": lambda rng: ((lambda x: F.scale(x, -1.7)), [leaf(rng.standard_normal(_shape(rng)))]),
    "sum": lambda rng: (F.tensor_sum, [leaf(rng.standard_normal(_shape(rng)))]),
    "xent_hard_void": _xent_hard,
    "xent_soft": _xent_soft,
}


@pytest.mark.parametrize("op", sorted(GRAD_CASES))
def test_gradient_finite_difference(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    worst = 0.0
    for _ in range(N_SHAPES):
        fn, inputs = GRAD_CASES[op](rng)
        worst = max(worst, check_gradients(fn, inputs, h=1e-5))
    assert worst < TOL, f"{op}: relative error {worst:.2e}"

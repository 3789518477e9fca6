import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denseflow.autodiff import (
    BatchNormState,
    ShapeError,
    Tensor,
    add,
    avgpool2d,
    batchnorm2d,
    concat,
    conv2d,
    conv_transpose2d,
    dropout,
    leaky_relu,
    maxpool2d,
    mean,
    mul,
    pow,
    reduce_sum,
    slice_channels,
    sub,
)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv_loop(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    if b is not None:
        out += b.reshape(1, o, 1, 1)
    return out


def deconv_loop(x, w, b, stride, pad, output_padding):
    """Scatter form: every input pixel stamps its weighted kernel."""
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * pad + kh + output_padding
    wo = (wd - 1) * stride - 2 * pad + kw + output_padding
    full = np.zeros((n, o, (h - 1) * stride + kh + output_padding, (wd - 1) * stride + kw + output_padding))
    for i in range(h):
        for j in range(wd):
            stamp = np.tensordot(x[:, :, i, j], w, axes=([1], [0]))
            full[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += stamp
    out = full[:, :, pad:pad + ho, pad:pad + wo]
    return out + b.reshape(1, o, 1, 1)


# -- elementwise and reductions -------------------------------------------------


def test_mean_example():
    assert mean(t64([1, 2, 3, 4])).item() == 2.5


def test_pow_example():
    assert pow(t64(16.0), 0.25).item() == pytest.approx(2.0)


def test_binary_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        add(t64(np.zeros(3)), t64(np.zeros(4)))


def test_scalar_broadcast_only():
    out = mul(t64([1.0, 2.0]), 3.0)
    np.testing.assert_array_equal(out.data, [3.0, 6.0])
    with pytest.raises(ShapeError):
        sub(t64(np.zeros((2, 2))), np.zeros(2))


def test_reduce_sum_gradient():
    x = t64([1.0, 2.0, 3.0], grad=True)
    reduce_sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(3))


# -- activations and dropout ---------------------------------------------------


def test_leaky_relu_examples():
    out = leaky_relu(t64([5.0, -2.0]), 0.1)
    np.testing.assert_allclose(out.data, [5.0, -0.2])


def test_leaky_relu_gradient_slopes():
    x = t64([3.0, -1.5, 0.7, -0.2], grad=True)
    reduce_sum(leaky_relu(x, 0.1)).backward()
    np.testing.assert_allclose(x.grad, [1.0, 0.1, 1.0, 0.1])


def test_leaky_relu_bad_slope():
    with pytest.raises(ValueError):
        leaky_relu(t64([1.0]), 1.0)


@pytest.mark.parametrize("training", [True, False])
def test_dropout_rate_zero_is_identity(training, rng):
    x = t64(rng.standard_normal(10))
    assert dropout(x, 0.0, training, rng) is x


def test_dropout_eval_is_identity(rng):
    x = t64(rng.standard_normal(10))
    assert dropout(x, 0.5, False, rng) is x


def test_dropout_unbiased():
    x = Tensor(np.ones(10**6, dtype=np.float32))
    out = dropout(x, 0.2, True, np.random.default_rng(0))
    assert abs(out.data.mean() - 1.0) < 0.01
    assert set(np.unique(out.data)) <= {0.0, np.float32(1.25)}


def test_dropout_deterministic_under_seed():
    x = Tensor(np.ones(1000, dtype=np.float32))
    a = dropout(x, 0.3, True, np.random.default_rng(9)).data
    b = dropout(x, 0.3, True, np.random.default_rng(9)).data
    assert np.array_equal(a, b)


def test_dropout_rate_one_rejected(rng):
    with pytest.raises(ValueError):
        dropout(t64([1.0]), 1.0, True, rng)


# -- layout -------------------------------------------------------------------------


def test_concat_single_is_identity(rng):
    x = t64(rng.standard_normal((1, 2, 3, 3)))
    assert concat([x]) is x


def test_concat_layout(rng):
    a = t64(rng.standard_normal((2, 16, 4, 4)))
    b = t64(rng.standard_normal((2, 12, 4, 4)))
    out = concat([a, b])
    assert out.shape == (2, 28, 4, 4)
    np.testing.assert_array_equal(out.data[:, :16], a.data)


def test_concat_spatial_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 2, 5, 4\)"):
        concat([t64(np.zeros((1, 2, 4, 4))), t64(np.zeros((1, 2, 5, 4)))])


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_concat_slice_round_trip(widths, seed):
    rng = np.random.default_rng(seed)
    parts = [t64(rng.standard_normal((2, c, 3, 3))) for c in widths]
    joined = concat(parts)
    lo = 0
    for p in parts:
        back = slice_channels(joined, lo, lo + p.shape[1])
        assert np.array_equal(back.data, p.data)
        lo += p.shape[1]


# -- convolution ------------------------------------------------------------------------


@pytest.mark.parametrize("cin,cout,k,stride,pad", [
    (3, 4, 3, 1, 1), (7, 2, 3, 1, 1), (3, 5, 1, 1, 0), (3, 4, 3, 2, 1), (6, 6, 3, 1, 0),
])
def test_conv2d_matches_loop(rng, cin, cout, k, stride, pad):
    x = rng.standard_normal((2, cin, 7, 6))
    w = rng.standard_normal((cout, cin, k, k))
    b = rng.standard_normal(cout)
    out = conv2d(t64(x), t64(w), t64(b), stride, pad)
    np.testing.assert_allclose(out.data, conv_loop(x, w, b, stride, pad), rtol=1e-10, atol=1e-10)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError, match="channel mismatch"):
        conv2d(t64(np.zeros((1, 3, 4, 4))), t64(np.zeros((2, 4, 3, 3))))


@pytest.mark.parametrize("cin,cout,stride,pad,op", [(3, 4, 2, 1, 1), (5, 2, 2, 1, 1), (2, 3, 1, 1, 0)])
def test_conv_transpose2d_matches_loop(rng, cin, cout, stride, pad, op):
    x = rng.standard_normal((2, cin, 4, 5))
    w = rng.standard_normal((cin, cout, 3, 3))
    b = rng.standard_normal(cout)
    out = conv_transpose2d(t64(x), t64(w), t64(b), stride, pad, op)
    np.testing.assert_allclose(out.data, deconv_loop(x, w, b, stride, pad, op), rtol=1e-10, atol=1e-10)


def test_deconv_doubles_extent():
    out = conv_transpose2d(t64(np.zeros((1, 48, 8, 8))), t64(np.zeros((48, 64, 3, 3))), None, 2, 1, 1)
    assert out.shape == (1, 64, 16, 16)


@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([(1, 1), (2, 1), (2, 0), (1, 0)]),
       st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_conv_adjoint_identity(c, o, geom, seed):
    """<conv_transpose(x), y> == <x, conv(y)> for matched geometry."""
    stride, pad = geom
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((o, c, 3, 3))
    y = rng.standard_normal((2, c, 8, 8))
    cy = conv2d(t64(y), t64(w), None, stride, pad).data
    x = rng.standard_normal(cy.shape)
    op = (8 + 2 * pad - 3) % stride
    tx = conv_transpose2d(t64(x), t64(w.transpose(0, 1, 2, 3)), None, stride, pad, op).data
    assert tx.shape == y.shape
    lhs = np.vdot(tx, y)
    rhs = np.vdot(x, cy)
    assert lhs == pytest.approx(rhs, rel=1e-5, abs=1e-9)


# -- pooling ------------------------------------------------------------------------------


def test_maxpool_single_window():
    assert maxpool2d(t64([[[[1, 2], [3, 4]]]])).item() == 4.0


def test_maxpool_ties_route_to_first_index():
    x = t64(np.full((1, 1, 4, 4), 2.5), grad=True)
    out, idx = maxpool2d(x, return_indices=True)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.5))
    reduce_sum(out).backward()
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad[0, 0], expected)
    np.testing.assert_array_equal(idx[0, 0], [[0, 2], [8, 10]])


def test_maxpool_matches_loop(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    out = maxpool2d(t64(x)).data
    ref = np.array([[[[x[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max() for j in range(3)]
                      for i in range(3)] for c in range(2)]])
    np.testing.assert_array_equal(out, ref)


def test_maxpool_overlapping_matches_loop(rng):
    x = rng.standard_normal((2, 2, 5, 6))
    out = maxpool2d(t64(x), window=3, stride=1).data
    ref = np.zeros((2, 2, 3, 4))
    for i in range(3):
        for j in range(4):
            ref[:, :, i, j] = x[:, :, i:i + 3, j:j + 3].max(axis=(2, 3))
    np.testing.assert_array_equal(out, ref)


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        maxpool2d(t64(np.zeros((1, 1, 1, 4))))


def test_avgpool_example():
    assert avgpool2d(t64([[[[1, 2], [3, 4]]]]), 2).item() == 2.5


def test_avgpool_constant():
    out = avgpool2d(t64(np.full((1, 3, 8, 8), 0.7)), 2)
    np.testing.assert_allclose(out.data, np.full((1, 3, 4, 4), 0.7))


def test_avgpool_non_divisible():
    with pytest.raises(ShapeError):
        avgpool2d(t64(np.zeros((1, 1, 5, 4))), 2)


@given(st.integers(1, 3), st.sampled_from([1, 2, 4]), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_avgpool_conserves_mean(c, window, seed):
    x = np.random.default_rng(seed).standard_normal((2, c, 8, 8))
    assert avgpool2d(t64(x), window).data.mean() == pytest.approx(x.mean(), abs=1e-12)


# -- batch normalization -----------------------------------------------------------------


def test_batchnorm_standardizes(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3.0 + 2.0
    out = batchnorm2d(t64(x), t64(np.ones(3)), t64(np.zeros(3))).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-5)


def test_batchnorm_affine_law(rng):
    x = rng.standard_normal((4, 3, 5, 5))
    out = batchnorm2d(t64(x), t64(np.full(3, 2.0)), t64(np.full(3, 3.0))).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 3.0, atol=1e-4)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2.0, atol=1e-4)


def test_batchnorm_eval_formula(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    state = BatchNormState(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    out = batchnorm2d(t64(x), t64(gamma), t64(beta), state, training=False).data
    c = (slice(None), None, None)
    ref = (x - state.running_mean[c]) / np.sqrt(state.running_var[c] + 1e-5) * gamma[c] + beta[c]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_batchnorm_running_stats_update(rng):
    x = rng.standard_normal((2, 3, 4, 4)) + 1.0
    state = BatchNormState.fresh(3, np.float64)
    batchnorm2d(t64(x), t64(np.ones(3)), t64(np.zeros(3)), state)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batchnorm_single_value_rejected():
    with pytest.raises(ValueError, match="N\\*H\\*W"):
        batchnorm2d(t64(np.zeros((1, 2, 1, 1))), t64(np.ones(2)), t64(np.zeros(2)))

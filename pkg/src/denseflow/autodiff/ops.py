"""Differentiable primitives.

Each primitive computes its forward result with numpy and registers a closure
mapping the output gradient to one gradient per input.  Binary elementwise ops
accept equal shapes, or a Python number / 0-d tensor on either side; nothing
else broadcasts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _fused
from .kernels import ConvGeometry, conv_backward, conv_forward
from .tensor import Tensor


class ShapeError(ValueError):
    """Operand shapes are incompatible with the primitive."""


def _scalar_or_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    if np.ndim(x) != 0:
        raise ShapeError(f"only scalars broadcast; got array of shape {np.shape(x)}")
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = _scalar_or_tensor(a, b.dtype)
    b = _scalar_or_tensor(b, a.dtype)
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(grad, shape):
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=grad.dtype).reshape(shape)


# -- elementwise and reductions -------------------------------------------------


def add(a, b):
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb))
    )


def sub(a, b):
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb))
    )


def mul(a, b):
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def back(g):
        ga = _reduce_to(g * bd, sa) if a.requires_grad else None
        gb = _reduce_to(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, (a, b), back)


def neg(a):
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def pow(a, exponent):
    """Elementwise power with a constant real exponent."""
    exponent = float(exponent)
    ad = a.data
    out = np.power(ad, exponent)
    if exponent == 2.0:
        return Tensor._from_op(out, (a,), lambda g: (g * (2.0 * ad),))

    def back(g):
        # out / a avoids a second power call; a may contain zeros only when
        # the exponent is >= 1, so fall back to the direct form there
        if exponent >= 1.0:
            return (g * (exponent * np.power(ad, exponent - 1.0)),)
        return (g * (exponent * out / ad),)

    return Tensor._from_op(out, (a,), back)


def mean(a):
    n = a.size
    shape = a.shape
    dtype = a.dtype

    def back(g):
        return (np.full(shape, g / n, dtype=dtype),)

    return Tensor._from_op(np.asarray(a.data.mean(dtype=np.float64), dtype=dtype), (a,), back)


def reduce_sum(a):
    shape = a.shape
    dtype = a.dtype

    def back(g):
        return (np.full(shape, g, dtype=dtype),)

    return Tensor._from_op(np.asarray(a.data.sum(dtype=np.float64), dtype=dtype), (a,), back)


def leaky_relu(x, slope):
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    xd = x.data
    s = xd.dtype.type(slope)
    out = xd * s
    np.maximum(out, xd, out=out)

    def back(g):
        # branch-free: np.where mispredicts on random signs and runs ~4x slower
        scale = (xd >= 0).astype(xd.dtype)
        scale *= xd.dtype.type(1.0) - s
        scale += s
        scale *= g
        return (scale,)

    return Tensor._from_op(out, (x,), back)


def dropout(x, rate, training, rng):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    mask = keep.astype(x.dtype)
    mask *= x.dtype.type(1.0 / (1.0 - rate))
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


# -- layout ------------------------------------------------------------------


def concat(inputs, axis=1):
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0]
    for t in inputs[1:]:
        if t.dtype != ref.dtype:
            raise TypeError(f"concat dtype mismatch: {ref.dtype} vs {t.dtype}")
        same = t.ndim == ref.ndim and all(
            d1 == d2 for k, (d1, d2) in enumerate(zip(t.shape, ref.shape)) if k != axis
        )
        if not same:
            raise ShapeError(
                f"concat along axis {axis} needs matching other extents: {ref.shape} vs {t.shape}"
            )
    sizes = [t.shape[axis] for t in inputs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in inputs], axis=axis)

    def back(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi, t in zip(bounds[:-1], bounds[1:], inputs):
            if not t.requires_grad:
                grads.append(None)
                continue
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return Tensor._from_op(out, inputs, back)


def slice_channels(x, start, stop):
    """x[:, start:stop] for an NCHW tensor."""
    c = x.shape[1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel slice [{start}, {stop}) outside 0..{c}")
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return Tensor._from_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), back)


def reshape(x, shape):
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# -- convolution ------------------------------------------------------------------


def _check_conv_args(stride, pad):
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Zero-padded cross-correlation, NCHW input, (Cout, Cin, kh, kw) weight."""
    _check_conv_args(stride, pad)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} has {c} channels, weight {weight.shape} expects {wc}"
        )
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {x.shape} (pad {pad})")
    g = ConvGeometry.for_conv(h, w, kh, kw, stride, pad)
    out = conv_forward(x.data, weight.data, g)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)
    xd, wd = x.data, weight.data

    def back(grad):
        dx, dw = conv_backward(
            xd, wd, grad, g, need_input=x.requires_grad, need_weight=weight.requires_grad
        )
        if dw is not None:
            dw = np.ascontiguousarray(dw)
        db = grad.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, back)


def conv_transpose2d(x, weight, bias=None, stride=1, pad=0, output_padding=0):
    """Adjoint of conv2d with respect to its input, weight (Cin, Cout, kh, kw).

    Output extent is ``(H - 1) * stride - 2 * pad + kh + output_padding``.
    """
    _check_conv_args(stride, pad)
    if not 0 <= output_padding < stride:
        raise ValueError(f"output_padding must lie in [0, stride), got {output_padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d expects 4-D input and weight, got {x.shape} and {weight.shape}"
        )
    n, c, h, w = x.shape
    wc, o, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(
            f"conv_transpose2d channel mismatch: input {x.shape} has {c} channels, "
            f"weight {weight.shape} expects {wc}"
        )
    ho = (h - 1) * stride - 2 * pad + kh + output_padding
    wo = (w - 1) * stride - 2 * pad + kw + output_padding
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d output would be empty for input {x.shape}")
    # the forward convolution whose input-gradient this is maps (o, ho, wo) -> (c, h, w)
    g = ConvGeometry(kh, kw, stride, pad, ho, wo, h, w)
    xd, wd = x.data, weight.data
    out, _ = conv_backward(None, wd, xd, g, need_input=True, need_weight=False)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def back(grad):
        dx = conv_forward(grad, wd, g) if x.requires_grad else None
        dw = None
        if weight.requires_grad:
            _, dw = conv_backward(grad, wd, xd, g, need_input=False, need_weight=True)
            dw = np.ascontiguousarray(dw)
        db = grad.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, back)


# -- pooling ------------------------------------------------------------------


def _pool_tiled(xd, window, ho, wo):
    """Non-overlapping windows."""
    n, c, h, w = xd.shape
    out = np.empty((n, c, ho, wo), dtype=xd.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.intp)
    _fused.pool_tiled(xd, window, out, arg)

    def back(g):
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        _fused.unpool_tiled(g, arg, window, dx)
        return (dx,)

    return out, arg, back


def _pool_overlapping(xd, window, stride, ho, wo):
    n, c, h, w = xd.shape
    # (n, c, ho, wo, window*window) view of the candidates, row-major in-window
    win = np.lib.stride_tricks.sliding_window_view(xd, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho, wo, window * window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * stride + arg // window
    cols = np.arange(wo)[None, :] * stride + arg % window
    flat = (rows * w + cols).reshape(n * c, -1)

    def back(g):
        dx = np.zeros(n * c * h * w, dtype=g.dtype)
        nc = np.arange(n * c)[:, None] * (h * w)
        np.add.at(dx, (nc + flat).ravel(), g.ravel())
        return (dx.reshape(n, c, h, w),)

    return out, arg, back


def maxpool2d(x, window=2, stride=2, return_indices=False):
    """Max over windows; ties resolve to the lowest linear index in the window.

    With ``return_indices`` the per-output flat index (into H*W of its channel)
    of the winning element is returned alongside the result.
    """
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than spatial extent {h}x{w}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    xd = x.data
    if stride == window:
        out, arg, back = _pool_tiled(xd, window, ho, wo)
    else:
        out, arg, back = _pool_overlapping(xd, window, stride, ho, wo)
    rows = np.arange(ho)[:, None] * stride + arg // window
    cols = np.arange(wo)[None, :] * stride + arg % window
    flat = rows * w + cols

    out_t = Tensor._from_op(np.ascontiguousarray(out), (x,), back)
    if return_indices:
        return out_t, flat
    return out_t


def avgpool2d(x, window):
    n, c, h, w = x.shape
    if window < 1 or h % window or w % window:
        raise ShapeError(f"avgpool window {window} does not divide spatial extent {h}x{w}")
    if window == 1:
        return x
    ho, wo = h // window, w // window
    blocks = x.data.reshape(n, c, ho, window, wo, window)
    out = blocks.mean(axis=(3, 5))
    inv = x.dtype.type(1.0 / (window * window))

    def back(g):
        gx = np.broadcast_to((g * inv)[:, :, :, None, :, None], blocks.shape)
        return (np.ascontiguousarray(gx).reshape(n, c, h, w),)

    return Tensor._from_op(out, (x,), back)


# -- batch normalization ---------------------------------------------------------


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def normalize2d(x, state=None, training=True, momentum=0.1, eps=1e-5):
    """Per-channel standardization without the affine part of batch norm.

    Train mode uses batch statistics and, when ``state`` is given, moves the
    running statistics toward them (running <- (1 - momentum) * running +
    momentum * batch, with the unbiased batch variance).  Eval mode uses the
    running statistics.
    """
    n, c, h, w = x.shape
    m = n * h * w
    xd = np.ascontiguousarray(x.data)
    dt = xd.dtype.type
    x3 = xd.reshape(n, c, h * w)
    if training:
        if m < 2:
            raise ValueError("batchnorm in train mode needs N*H*W >= 2")
        mu64 = np.empty(c)
        var64 = np.empty(c)
        _fused.channel_moments(x3, mu64, var64)
        mu = mu64.astype(xd.dtype)
        var = var64.astype(xd.dtype)
        if state is not None:
            unbiased = var * dt(m / (m - 1))
            state.running_mean *= dt(1.0 - momentum)
            state.running_mean += dt(momentum) * mu
            state.running_var *= dt(1.0 - momentum)
            state.running_var += dt(momentum) * unbiased
    else:
        if state is None:
            raise ValueError("batchnorm in eval mode needs running statistics")
        mu = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    inv = (dt(1.0) / np.sqrt(var + dt(eps))).astype(xd.dtype)
    xhat = np.empty_like(xd)
    xh3 = xhat.reshape(n, c, h * w)
    _fused.standardize(x3, mu, inv, xh3)

    def back(g):
        if not training:
            return (g * inv.reshape(1, c, 1, 1),)
        dx = np.empty_like(xhat)
        _fused.standardize_backward(np.ascontiguousarray(g).reshape(n, c, h * w), xh3, inv,
                                    dx.reshape(n, c, h * w))
        return (dx,)

    return Tensor._from_op(xhat, (x,), back)


def affine_concat(inputs, gamma, beta, slope=None):
    """Channel concatenation of ``inputs`` followed by ``gamma * x + beta``.

    Fused so that the concatenated tensor is written once.  With ``slope`` a
    leaky ReLU is applied in place on top, which equals
    ``leaky_relu(affine_concat(inputs, gamma, beta), slope)``.
    """
    inputs = list(inputs)
    ref = inputs[0]
    n, _, h, w = ref.shape
    for t in inputs[1:]:
        if t.shape[0] != n or t.shape[2:] != (h, w):
            raise ShapeError(f"concat needs matching N, H, W: {ref.shape} vs {t.shape}")
    sizes = [t.shape[1] for t in inputs]
    c = int(np.sum(sizes))
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    bounds = [int(b) for b in np.cumsum([0] + sizes)]
    dt = ref.dtype.type
    gdata = gamma.data.astype(ref.dtype, copy=False)
    bdata = beta.data.astype(ref.dtype, copy=False)
    gated = slope is not None
    s = dt(slope if gated else 0.0)
    out = np.empty((n, c, h, w), dtype=ref.dtype)
    out3 = out.reshape(n, c, h * w)
    for lo, t in zip(bounds, inputs):
        x3 = t.data.reshape(n, t.shape[1], h * w)
        _fused.affine_lrelu_forward(x3, out3, lo, gdata, bdata, s, gated)

    def back(g):
        g3 = np.ascontiguousarray(g).reshape(n, c, h * w)
        dgamma = np.empty(c, dtype=g.dtype)
        dbeta = np.empty(c, dtype=g.dtype)
        grads = []
        for lo, t in zip(bounds, inputs):
            x3 = t.data.reshape(n, t.shape[1], h * w)
            want = t.requires_grad
            dx = np.empty_like(x3) if want else x3
            _fused.affine_lrelu_backward(g3, out3, x3, lo, gdata, s, gated, dx, want, dgamma, dbeta)
            grads.append(dx.reshape(t.shape) if want else None)
        return (*grads, dgamma, dbeta)

    return Tensor._from_op(out, (*inputs, gamma, beta), back)


def batchnorm2d(x, gamma, beta, state=None, training=True, momentum=0.1, eps=1e-5):
    """Batch normalization: :func:`normalize2d` then the per-channel affine map."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    return affine_concat([normalize2d(x, state, training, momentum, eps)], gamma, beta)

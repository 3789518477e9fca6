"""Compiled single-pass kernels for the per-channel affine + leaky ReLU map.

The numpy formulation of these loops makes four to six passes over arrays of
tens of megabytes; here each direction is one pass.  Arrays are viewed as
(N, C, H*W).  Reductions use reassociation so that they vectorize; for fixed
inputs the result is still the same on every call.
"""

import numba
import numpy as np

_FAST = {"reassoc", "nsz", "contract"}


@numba.njit(cache=True, fastmath=_FAST)
def affine_lrelu_forward(x, out, lo, gamma, beta, slope, gated):
    """out[:, lo:lo+C] = act(gamma * x + beta) for x of shape (N, C, P)."""
    n, c, p = x.shape
    for i in range(n):
        for j in range(c):
            gg = gamma[lo + j]
            bb = beta[lo + j]
            for k in range(p):
                v = x[i, j, k] * gg + bb
                if gated and v < 0:
                    v = v * slope
                out[i, lo + j, k] = v


@numba.njit(cache=True, fastmath=_FAST)
def affine_lrelu_backward(g, out, x, lo, gamma, slope, gated, dx, want_dx, dgamma, dbeta):
    """Gradients of :func:`affine_lrelu_forward` for one input chunk."""
    n, c, p = x.shape
    for j in range(c):
        gg = gamma[lo + j]
        acc_g = np.float64(0.0)
        acc_b = np.float64(0.0)
        for i in range(n):
            sg = x.dtype.type(0.0)
            sb = x.dtype.type(0.0)
            for k in range(p):
                gv = g[i, lo + j, k]
                if gated and out[i, lo + j, k] < 0:
                    gv = gv * slope
                sg += gv * x[i, j, k]
                sb += gv
                if want_dx:
                    dx[i, j, k] = gv * gg
            acc_g += sg
            acc_b += sb
        dgamma[lo + j] = acc_g
        dbeta[lo + j] = acc_b


@numba.njit(cache=True)
def tap_sum(z, out, stride, pad):
    """out[n, o, y, x] += sum_ij z[n, i, j, o, y*stride + i - pad, x*stride + j - pad]."""
    nb, kh, kw, o, h, w = z.shape
    ho, wo = out.shape[2], out.shape[3]
    for n in range(nb):
        for c in range(o):
            for i in range(kh):
                for j in range(kw):
                    for y in range(ho):
                        iy = y * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for x in range(wo):
                            ix = x * stride + j - pad
                            if 0 <= ix < w:
                                out[n, c, y, x] += z[n, i, j, c, iy, ix]



@numba.njit(cache=True)
def gather_taps(a, col, stride, pad):
    """col[n, i, j, c, y, x] = a[n, c, y*stride + i - pad, x*stride + j - pad], zero outside."""
    nb, kh, kw, c, ho, wo = col.shape
    h, w = a.shape[2], a.shape[3]
    zero = a.dtype.type(0)
    for n in range(nb):
        for i in range(kh):
            for j in range(kw):
                for ch in range(c):
                    for y in range(ho):
                        iy = y * stride + i - pad
                        inside = 0 <= iy < h
                        for x in range(wo):
                            ix = x * stride + j - pad
                            if inside and 0 <= ix < w:
                                col[n, i, j, ch, y, x] = a[n, ch, iy, ix]
                            else:
                                col[n, i, j, ch, y, x] = zero


@numba.njit(cache=True)
def scatter_taps(col, out, stride, pad):
    """Adjoint of :func:`gather_taps`, accumulated into ``out``."""
    nb, kh, kw, c, ho, wo = col.shape
    h, w = out.shape[2], out.shape[3]
    for n in range(nb):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    for y in range(ho):
                        iy = y * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for x in range(wo):
                            ix = x * stride + j - pad
                            if 0 <= ix < w:
                                out[n, ch, iy, ix] += col[n, i, j, ch, y, x]


@numba.njit(cache=True)
def tap_spread(dy, z, stride, pad):
    """z[n, i, j, o, y*stride + i - pad, x*stride + j - pad] = dy[n, o, y, x], zero elsewhere."""
    nb, kh, kw, o, h, w = z.shape
    ho, wo = dy.shape[2], dy.shape[3]
    zero = dy.dtype.type(0)
    for n in range(nb):
        for i in range(kh):
            for j in range(kw):
                # columns ix whose source x = (ix - j + pad) / stride is a valid output column
                ix_lo = max(0, j - pad)
                ix_hi = min(w, (wo - 1) * stride + j - pad + 1)
                for c in range(o):
                    for iy in range(h):
                        ty = iy - i + pad
                        y = ty // stride
                        if ty < 0 or ty % stride != 0 or y >= ho:
                            for ix in range(w):
                                z[n, i, j, c, iy, ix] = zero
                            continue
                        for ix in range(ix_lo):
                            z[n, i, j, c, iy, ix] = zero
                        if stride == 1:
                            for ix in range(ix_lo, ix_hi):
                                z[n, i, j, c, iy, ix] = dy[n, c, y, ix - j + pad]
                        else:
                            for ix in range(ix_lo, ix_hi):
                                tx = ix - j + pad
                                if tx % stride == 0:
                                    z[n, i, j, c, iy, ix] = dy[n, c, y, tx // stride]
                                else:
                                    z[n, i, j, c, iy, ix] = zero
                        for ix in range(max(ix_lo, ix_hi), w):
                            z[n, i, j, c, iy, ix] = zero


@numba.njit(cache=True, fastmath=_FAST)
def channel_moments(x, mean, var):
    """Per-channel mean and biased variance of x (N, C, P), centred second pass."""
    n, c, p = x.shape
    m = np.zeros(2, dtype=x.dtype)
    for j in range(c):
        acc = 0.0
        for i in range(n):
            s = m[1]
            for k in range(p):
                s += x[i, j, k]
            acc += s
        mu = acc / (n * p)
        m[0] = mu
        mj = m[0]
        acc = 0.0
        for i in range(n):
            s = m[1]
            for k in range(p):
                d = x[i, j, k] - mj
                s += d * d
            acc += s
        mean[j] = mu
        var[j] = acc / (n * p)


@numba.njit(cache=True, fastmath=_FAST)
def standardize(x, mean, inv, out):
    n, c, p = x.shape
    for i in range(n):
        for j in range(c):
            mj = mean[j]
            ij = inv[j]
            for k in range(p):
                out[i, j, k] = (x[i, j, k] - mj) * ij


@numba.njit(cache=True, fastmath=_FAST)
def standardize_backward(g, xhat, inv, dx):
    """dx = inv * (g - mean(g) - xhat * mean(g * xhat)), means per channel."""
    n, c, p = g.shape
    buf = np.zeros(3, dtype=g.dtype)
    for j in range(c):
        sg = 0.0
        sgx = 0.0
        for i in range(n):
            a = buf[2]
            b = buf[2]
            for k in range(p):
                gv = g[i, j, k]
                a += gv
                b += gv * xhat[i, j, k]
            sg += a
            sgx += b
        buf[0] = sg / (n * p)
        buf[1] = sgx / (n * p)
        gm = buf[0]
        gxm = buf[1]
        ij = inv[j]
        for i in range(n):
            for k in range(p):
                dx[i, j, k] = (g[i, j, k] - gm - xhat[i, j, k] * gxm) * ij


@numba.njit(cache=True)
def pool_tiled(x, window, out, arg):
    """Max over non-overlapping windows; first maximum in row-major order wins."""
    nb, c, ho, wo = out.shape
    for n in range(nb):
        for ch in range(c):
            for y in range(ho):
                for xo in range(wo):
                    best = x[n, ch, y * window, xo * window]
                    k_best = 0
                    k = 0
                    for a in range(window):
                        for b in range(window):
                            v = x[n, ch, y * window + a, xo * window + b]
                            if v > best:
                                best = v
                                k_best = k
                            k += 1
                    out[n, ch, y, xo] = best
                    arg[n, ch, y, xo] = k_best


@numba.njit(cache=True)
def unpool_tiled(g, arg, window, dx):
    """Route g to the winning position of each window; dx must start at zero."""
    nb, c, ho, wo = g.shape
    for n in range(nb):
        for ch in range(c):
            for y in range(ho):
                for xo in range(wo):
                    k = arg[n, ch, y, xo]
                    dx[n, ch, y * window + k // window, xo * window + k % window] = g[n, ch, y, xo]

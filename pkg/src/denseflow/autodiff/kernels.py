"""Raw numpy convolution kernels (no autodiff).

All arrays are NCHW.  A convolution is computed by gathering the kernel taps on
whichever side of the weight has fewer channels: for a dense layer with a wide
input and a 12-channel output the taps are spread over the *output* (one GEMM
with M = kh*kw*Cout, no im2col of the wide input), while a narrow stem conv
gathers taps of the input in the usual im2col fashion.  At stride 1 both
routes run the same number of multiply-adds; at stride s the output-side
route would multiply s*s times more zeros, so strided geometry always gathers
on the input side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _fused


@dataclass(frozen=True)
class ConvGeometry:
    kh: int
    kw: int
    stride: int
    pad: int
    # spatial extent on the "input" side of the forward convolution
    h: int
    w: int
    # spatial extent on the "output" side
    ho: int
    wo: int

    @classmethod
    def for_conv(cls, h, w, kh, kw, stride, pad):
        ho = (h + 2 * pad - kh) // stride + 1
        wo = (w + 2 * pad - kw) // stride + 1
        return cls(kh, kw, stride, pad, h, w, ho, wo)

    def tap_slices(self, i, j):
        """Slices pairing output positions with input positions for tap (i, j).

        Output position y reads input row y*stride + i - pad.  Returns
        ``(out_rows, out_cols, in_rows, in_cols)`` or None when the tap never
        lands inside the input.
        """
        s, p = self.stride, self.pad
        y0 = max(0, -(-(p - i) // s))
        y1 = min(self.ho, (self.h - 1 + p - i) // s + 1)
        x0 = max(0, -(-(p - j) // s))
        x1 = min(self.wo, (self.w - 1 + p - j) // s + 1)
        if y1 <= y0 or x1 <= x0:
            return None
        iy0 = y0 * s + i - p
        ix0 = x0 * s + j - p
        return (
            slice(y0, y1),
            slice(x0, x1),
            slice(iy0, iy0 + (y1 - y0 - 1) * s + 1, s),
            slice(ix0, ix0 + (x1 - x0 - 1) * s + 1, s),
        )


def gather_taps(a, g: ConvGeometry):
    """im2col: (N, C, H, W) -> (N, kh, kw, C, Ho, Wo)."""
    n, c = a.shape[:2]
    col = np.empty((n, g.kh, g.kw, c, g.ho, g.wo), dtype=a.dtype)
    _fused.gather_taps(a, col, g.stride, g.pad)
    return col


def scatter_taps(col, g: ConvGeometry):
    """Adjoint of :func:`gather_taps`: (N, kh, kw, C, Ho, Wo) -> (N, C, H, W)."""
    n, c = col.shape[0], col.shape[3]
    out = np.zeros((n, c, g.h, g.w), dtype=col.dtype)
    _fused.scatter_taps(col, out, g.stride, g.pad)
    return out


def tap_sum(z, g: ConvGeometry):
    """(N, kh, kw, O, H, W) -> (N, O, Ho, Wo); out[y] = sum_ij z[ij, y*s+i-p]."""
    n, o = z.shape[0], z.shape[3]
    out = np.zeros((n, o, g.ho, g.wo), dtype=z.dtype)
    _fused.tap_sum(z, out, g.stride, g.pad)
    return out


def tap_spread(dy, g: ConvGeometry):
    """Adjoint of :func:`tap_sum`: (N, O, Ho, Wo) -> (N, kh, kw, O, H, W)."""
    n, o = dy.shape[:2]
    z = np.empty((n, g.kh, g.kw, o, g.h, g.w), dtype=dy.dtype)
    _fused.tap_spread(np.ascontiguousarray(dy), z, g.stride, g.pad)
    return z


def _batched_outer(a, b):
    """sum_n a[n] @ b[n].T for stacks of matrices."""
    return np.matmul(a, b.transpose(0, 2, 1)).sum(axis=0)


def conv_forward(x, w, g: ConvGeometry):
    """Cross-correlation of x (N, C, H, W) with w (O, C, kh, kw)."""
    n, c = x.shape[:2]
    o = w.shape[0]
    taps = g.kh * g.kw
    if taps == 1 and g.stride == 1 and g.pad == 0:
        out = np.matmul(w.reshape(o, c), x.reshape(n, c, -1))
        return out.reshape(n, o, g.ho, g.wo)
    if c <= o or g.stride > 1:
        col = gather_taps(x, g).reshape(n, taps * c, g.ho * g.wo)
        wa = w.transpose(0, 2, 3, 1).reshape(o, taps * c)
        return np.matmul(wa, col).reshape(n, o, g.ho, g.wo)
    wb = w.transpose(2, 3, 0, 1).reshape(taps * o, c)
    z = np.matmul(wb, x.reshape(n, c, g.h * g.w))
    return tap_sum(z.reshape(n, g.kh, g.kw, o, g.h, g.w), g)


def conv_backward(x, w, dy, g: ConvGeometry, need_input=True, need_weight=True):
    """Gradients of :func:`conv_forward` w.r.t. (x, w); either may be None.

    ``x`` is only read when the weight gradient is requested, so callers
    computing a transposed convolution may pass ``x=None``.
    """
    n = dy.shape[0]
    o, c = w.shape[:2]
    taps = g.kh * g.kw
    dx = dw = None
    if taps == 1 and g.stride == 1 and g.pad == 0:
        dy2 = dy.reshape(n, o, -1)
        if need_input:
            dx = np.matmul(w.reshape(o, c).T, dy2).reshape(n, c, g.h, g.w)
        if need_weight:
            dw = _batched_outer(dy2, x.reshape(n, c, -1)).reshape(o, c, 1, 1)
        return dx, dw
    if c <= o or g.stride > 1:
        dy2 = dy.reshape(n, o, g.ho * g.wo)
        wa = w.transpose(0, 2, 3, 1).reshape(o, taps * c)
        if need_input:
            dcol = np.matmul(wa.T, dy2).reshape(n, g.kh, g.kw, c, g.ho, g.wo)
            dx = scatter_taps(dcol, g)
        if need_weight:
            col = gather_taps(x, g).reshape(n, taps * c, g.ho * g.wo)
            dwa = _batched_outer(dy2, col)
            dw = dwa.reshape(o, g.kh, g.kw, c).transpose(0, 3, 1, 2)
        return dx, dw
    dz = tap_spread(dy, g).reshape(n, taps * o, g.h * g.w)
    if need_input:
        wb = w.transpose(2, 3, 0, 1).reshape(taps * o, c)
        dx = np.matmul(wb.T, dz).reshape(n, c, g.h, g.w)
    if need_weight:
        dwb = _batched_outer(dz, x.reshape(n, c, g.h * g.w))
        dw = dwb.reshape(g.kh, g.kw, o, c).transpose(2, 3, 0, 1)
    return dx, dw

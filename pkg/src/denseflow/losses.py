"""Inverse warping, the generalized Charbonnier penalty and the photometric loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, avgpool2d, mean, mul, pow, reduce_sum, sub
from .autodiff.ops import ShapeError

DEFAULT_LOSS_WEIGHTS = (0.32, 0.08, 0.04, 0.02, 0.01)


@dataclass(frozen=True)
class CharbonnierParams:
    alpha: float = 0.25
    epsilon: float = 0.001

    def __post_init__(self):
        if self.alpha <= 0 or self.epsilon <= 0:
            raise ValueError(f"Charbonnier alpha and epsilon must be positive: {self}")


@dataclass(frozen=True)
class LossWeights:
    """Per-level weights, coarsest level first."""

    weights: tuple = field(default=DEFAULT_LOSS_WEIGHTS)

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        object.__setattr__(self, "weights", w)
        if not w or any(v < 0 for v in w) or not any(v > 0 for v in w):
            raise ValueError(f"loss weights must be non-negative with one positive: {w}")

    def __len__(self):
        return len(self.weights)

    def __iter__(self):
        return iter(self.weights)

    def scaled(self, factor):
        return LossWeights(tuple(v * factor for v in self.weights))


def charbonnier(x, params=CharbonnierParams()):
    """(x^2 + eps^2)^alpha, elementwise."""
    return pow(mul(x, x) + params.epsilon**2, params.alpha)


def _as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _sample_coords(flow, h, w):
    """Clamped sample positions and the masks needed for the warp backward."""
    ys = np.arange(h, dtype=flow.dtype).reshape(1, h, 1)
    xs = np.arange(w, dtype=flow.dtype).reshape(1, 1, w)
    sx = xs + flow[:, 0]
    sy = ys + flow[:, 1]
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx_c = np.clip(sx, 0, w - 1)
    sy_c = np.clip(sy, 0, h - 1)
    gx = (sx == sx_c).astype(flow.dtype)
    gy = (sy == sy_c).astype(flow.dtype)
    return sx_c, sy_c, gx, gy, inside


def bilinear_warp(image, flow, return_mask=False):
    """Sample ``image`` at (row + v, col + u) with bilinear interpolation.

    ``image`` is (N, C, H, W) and ``flow`` is (N, 2, H, W) with channel 0 the
    horizontal displacement u and channel 1 the vertical displacement v.
    Sample positions outside the frame are clamped to the border.  With
    ``return_mask`` an (N, 1, H, W) float array marks pixels whose sample point
    fell inside the frame.
    """
    image = _as_tensor(image)
    flow = _as_tensor(flow, image.dtype)
    n, c, h, w = image.shape
    if flow.shape != (n, 2, h, w):
        raise ShapeError(f"flow shape {flow.shape} does not match image {image.shape}")
    img = image.data
    dt = img.dtype
    sx, sy, gx, gy, inside = _sample_coords(flow.data, h, w)
    # NaN positions index pixel 0 and propagate NaN through the weights
    x0 = np.floor(np.where(np.isnan(sx), 0, sx))
    y0 = np.floor(np.where(np.isnan(sy), 0, sy))
    wx = (sx - x0)[:, None]
    wy = (sy - y0)[:, None]
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    flat = img.reshape(n, c, h * w)
    idx = [(y * w + x).reshape(n, 1, h * w) for y, x in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]

    def gather(k):
        return np.take_along_axis(flat, np.broadcast_to(idx[k], (n, c, h * w)), axis=2).reshape(n, c, h, w)

    v00, v01, v10, v11 = (gather(k) for k in range(4))
    one = dt.type(1.0)
    top = v00 + wx * (v01 - v00)
    bottom = v10 + wx * (v11 - v10)
    out = top + wy * (bottom - top)

    def back(g):
        gimg = gflow = None
        if image.requires_grad:
            weights = ((one - wy) * (one - wx), (one - wy) * wx, wy * (one - wx), wy * wx)
            acc = np.zeros(n * c * h * w, dtype=np.float64)
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            for k in range(4):
                pos = (base + idx[k]).reshape(-1)
                acc += np.bincount(pos, weights=(g * weights[k]).reshape(-1), minlength=acc.size)
            gimg = acc.astype(dt).reshape(n, c, h, w)
        if flow.requires_grad:
            d_sx = (one - wy) * (v01 - v00) + wy * (v11 - v10)
            d_sy = bottom - top
            gu = (g * d_sx).sum(axis=1) * gx
            gv = (g * d_sy).sum(axis=1) * gy
            gflow = np.stack([gu, gv], axis=1)
        return gimg, gflow

    result = Tensor._from_op(out, (image, flow), back)
    if return_mask:
        return result, inside[:, None].astype(dt)
    return result


def reconstruction_loss(frame1, warped, params=CharbonnierParams(), mask=None):
    """Mean Charbonnier penalty of ``frame1 - warped`` over pixels and channels.

    With ``mask`` (N, 1, H, W) the mean runs over masked pixels only.
    """
    frame1 = _as_tensor(frame1, warped.dtype)
    if frame1.shape != warped.shape:
        raise ShapeError(f"reconstruction shapes differ: {frame1.shape} vs {warped.shape}")
    penalty = charbonnier(sub(frame1, warped), params)
    if mask is None:
        return mean(penalty)
    full = np.broadcast_to(mask, penalty.shape).astype(penalty.dtype)
    count = full.sum()
    if count == 0:
        raise ValueError("reconstruction mask selects no pixels")
    return mul(reduce_sum(mul(penalty, Tensor(full, dtype=penalty.dtype))), 1.0 / count)


def image_pyramid(image, levels):
    """Repeated 2x2 average pooling; coarsest level first, ``image`` itself last."""
    image = _as_tensor(image)
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = image.shape[-2:]
    div = 2 ** (levels - 1)
    if h % div or w % div:
        raise ShapeError(f"extent {h}x{w} not divisible by {div} for {levels} levels")
    out = [image]
    for _ in range(levels - 1):
        out.append(avgpool2d(out[-1], 2))
    return out[::-1]


def multiscale_loss(pyramid, frame1, frame2, weights=LossWeights(), params=CharbonnierParams(),
                    border="clamp", per_scale=False):
    """Weighted sum of per-level reconstruction losses.

    ``border="mask"`` drops pixels whose sample point leaves the frame from
    each level's mean instead of relying on border clamping.  With
    ``per_scale`` the unweighted per-level losses are returned as floats too.
    """
    levels = len(pyramid)
    if len(weights) != levels:
        raise ValueError(f"{len(weights)} loss weights for {levels} pyramid levels")
    if border not in ("clamp", "mask"):
        raise ValueError(f"border must be 'clamp' or 'mask', got {border!r}")
    dtype = pyramid[0].dtype
    p1 = image_pyramid(_as_tensor(frame1, dtype), levels)
    p2 = image_pyramid(_as_tensor(frame2, dtype), levels)
    total = None
    scales = []
    for flow, i1, i2, wgt in zip(pyramid, p1, p2, weights):
        if flow.shape[-2:] != i1.shape[-2:]:
            raise ShapeError(f"flow level {flow.shape} does not match image level {i1.shape}")
        if border == "mask":
            warped, inside = bilinear_warp(i2, flow, return_mask=True)
            term = reconstruction_loss(i1, warped, params, mask=inside)
        else:
            term = reconstruction_loss(i1, bilinear_warp(i2, flow), params)
        scales.append(float(term.data))
        weighted = mul(term, wgt)
        total = weighted if total is None else total + weighted
    if per_scale:
        return total, scales
    return total

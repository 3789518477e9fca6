"""Finite-difference checks over every differentiable primitive, the
multiscale loss and the assembled network.

Each check reduces the op's output to a scalar through a fixed random
projection, so every output element contributes a distinct weight.  Inputs
of kinked operators are drawn away from their kinks by at least ``KINK_GAP``.
All checks run in float64.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (
    BatchNormState,
    GradcheckReport,
    Tensor,
    add,
    affine_concat,
    avgpool2d,
    batchnorm2d,
    concat,
    conv2d,
    conv_transpose2d,
    dropout,
    gradcheck,
    leaky_relu,
    maxpool2d,
    mean,
    mul,
    neg,
    normalize2d,
    numerical_gradient,
    pow,
    reduce_sum,
    relative_error,
    reshape,
    slice_channels,
    sub,
)
from .losses import CharbonnierParams, LossWeights, bilinear_warp, charbonnier, multiscale_loss, reconstruction_loss
from .network import NetworkConfig, build

TOL = 1e-4
STEP = 1e-5
KINK_GAP = 1e-3
NETWORK_SAMPLES = 20


def _leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=np.float64)


def _projector(rng):
    """Scalar reduction sum(y * r) with r fixed on first use per shape."""
    cache = {}

    def project(y):
        if y.shape not in cache:
            cache[y.shape] = Tensor(rng.standard_normal(y.shape), dtype=np.float64)
        return reduce_sum(mul(y, cache[y.shape]))

    return project


def _away_from_zero(rng, shape, gap=KINK_GAP):
    x = rng.uniform(-1.0, 1.0, size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 0.5 * gap) * (gap + np.abs(x)), x)


def _distinct(rng, shape, gap=KINK_GAP):
    """Values pairwise at least ``gap`` apart (no pooling ties)."""
    n = int(np.prod(shape))
    spacing = max(4.0 / n, 2 * gap)
    return ((rng.permutation(n) - n / 2) * spacing).reshape(shape)


def _fractional_flow(rng, shape, max_disp, h, w):
    """Flow whose sample points are off-integer and inside the frame by KINK_GAP."""
    flow = rng.uniform(-max_disp, max_disp, size=shape)
    frac = flow - np.floor(flow)
    flow = np.where(frac < KINK_GAP, flow + 2 * KINK_GAP, flow)
    flow = np.where(frac > 1 - KINK_GAP, flow - 2 * KINK_GAP, flow)
    ys = np.arange(h).reshape(1, h, 1)
    xs = np.arange(w).reshape(1, 1, w)
    inside = ((xs + flow[:, 0] > KINK_GAP) & (xs + flow[:, 0] < w - 1 - KINK_GAP)
              & (ys + flow[:, 1] > KINK_GAP) & (ys + flow[:, 1] < h - 1 - KINK_GAP))
    # points that would leave the frame stay put, at a fractional offset
    flow[:, 0] = np.where(inside, flow[:, 0], 0.37)
    flow[:, 1] = np.where(inside, flow[:, 1], 0.41)
    flow[:, 0, :, -1] = -0.37
    flow[:, 1, -1, :] = -0.41
    return flow


def _elementwise(rng):
    p = _projector(rng)
    a, b = _leaf(rng.standard_normal((2, 3, 4, 4))), _leaf(rng.standard_normal((2, 3, 4, 4)))
    pos = _leaf(rng.uniform(0.5, 2.0, size=(2, 3, 4, 4)))
    s = _leaf(rng.standard_normal(()))
    yield gradcheck(lambda a, b: p(add(a, b)), [a, b], TOL, STEP, "add", ["a", "b"])
    yield gradcheck(lambda a, b: p(sub(a, b)), [a, b], TOL, STEP, "sub", ["a", "b"])
    yield gradcheck(lambda a, b: p(mul(a, b)), [a, b], TOL, STEP, "mul", ["a", "b"])
    yield gradcheck(lambda a, s: p(mul(a, s)), [a, s], TOL, STEP, "mul_scalar", ["a", "s"])
    yield gradcheck(lambda a: p(neg(a)), [a], TOL, STEP, "neg")
    yield gradcheck(lambda x: p(pow(x, 0.25)), [pos], TOL, STEP, "pow")
    yield gradcheck(lambda a: mean(mul(a, a)), [a], TOL, STEP, "mean")
    yield gradcheck(lambda a: reduce_sum(mul(a, a)), [a], TOL, STEP, "reduce_sum")
    yield gradcheck(lambda a: p(reshape(a, (6, 16))), [a], TOL, STEP, "reshape")


def _layout(rng):
    p = _projector(rng)
    a, b = _leaf(rng.standard_normal((2, 3, 4, 4))), _leaf(rng.standard_normal((2, 5, 4, 4)))
    yield gradcheck(lambda a, b: p(concat([a, b])), [a, b], TOL, STEP, "concat", ["a", "b"])
    yield gradcheck(lambda b: p(slice_channels(b, 1, 4)), [b], TOL, STEP, "slice_channels")


def _activations(rng):
    p = _projector(rng)
    x = _leaf(_away_from_zero(rng, (2, 3, 5, 5)))
    yield gradcheck(lambda x: p(leaky_relu(x, 0.1)), [x], TOL, STEP, "leaky_relu")
    yield gradcheck(lambda x: p(dropout(x, 0.3, True, np.random.default_rng(7))), [x], TOL, STEP, "dropout")


def _convolutions(rng):
    p = _projector(rng)
    x = _leaf(rng.standard_normal((2, 3, 6, 6)))
    xw = _leaf(rng.standard_normal((2, 7, 6, 6)))
    w = _leaf(rng.standard_normal((4, 3, 3, 3)) * 0.3)
    w_narrow = _leaf(rng.standard_normal((2, 7, 3, 3)) * 0.3)
    w1 = _leaf(rng.standard_normal((5, 3, 1, 1)))
    bias = _leaf(rng.standard_normal(4))
    labels = ["x", "w", "b"]
    yield gradcheck(lambda x, w, b: p(conv2d(x, w, b, 1, 1)), [x, w, bias], TOL, STEP, "conv2d", labels)
    yield gradcheck(lambda x, w: p(conv2d(x, w, None, 1, 1)), [xw, w_narrow], TOL, STEP,
                    "conv2d_wide_input", labels[:2])
    yield gradcheck(lambda x, w, b: p(conv2d(x, w, b, 2, 1)), [x, w, bias], TOL, STEP,
                    "conv2d_stride2", labels)
    yield gradcheck(lambda x, w: p(conv2d(x, w, None, 1, 0)), [x, w1], TOL, STEP, "conv2d_1x1", labels[:2])
    wt = _leaf(rng.standard_normal((3, 4, 3, 3)) * 0.3)
    bt = _leaf(rng.standard_normal(4))
    yield gradcheck(lambda x, w, b: p(conv_transpose2d(x, w, b, 2, 1, 1)), [x, wt, bt], TOL, STEP,
                    "conv_transpose2d", labels)


def _pooling(rng):
    p = _projector(rng)
    x = _leaf(_distinct(rng, (2, 3, 6, 6)))
    yield gradcheck(lambda x: p(maxpool2d(x, 2, 2)), [x], TOL, STEP, "maxpool2d")
    yield gradcheck(lambda x: p(maxpool2d(x, 3, 1)), [x], TOL, STEP, "maxpool2d_overlapping")
    yield gradcheck(lambda x: p(avgpool2d(x, 2)), [x], TOL, STEP, "avgpool2d")


def _normalization(rng):
    p = _projector(rng)
    x = _leaf(rng.standard_normal((3, 4, 5, 5)) * 2.0 + 1.0)
    gamma = _leaf(rng.uniform(0.5, 1.5, size=4))
    beta = _leaf(rng.standard_normal(4))
    g5 = _leaf(rng.uniform(0.5, 1.5, size=5))
    b5 = _leaf(rng.standard_normal(5))
    # inputs placed so the affine output stays away from the slope kink at 0
    z = _away_from_zero(rng, (3, 5, 5, 5))
    xs = (z - b5.data[None, :, None, None]) / g5.data[None, :, None, None]
    parts = [_leaf(xs[:, :2]), _leaf(xs[:, 2:])]
    labels = ["x", "gamma", "beta"]

    def bn_train(x, g, b):
        return p(batchnorm2d(x, g, b, BatchNormState.fresh(4, np.float64), training=True))

    state = BatchNormState(rng.standard_normal(4), rng.uniform(0.5, 2.0, size=4))

    def bn_eval(x, g, b):
        return p(batchnorm2d(x, g, b, state, training=False))

    yield gradcheck(bn_train, [x, gamma, beta], TOL, STEP, "batchnorm2d_train", labels)
    yield gradcheck(bn_eval, [x, gamma, beta], TOL, STEP, "batchnorm2d_eval", labels)
    yield gradcheck(lambda x: p(normalize2d(x, None, training=True)), [x], TOL, STEP, "normalize2d")
    yield gradcheck(lambda a, c, g, b: p(affine_concat([a, c], g, b, 0.1)), [*parts, g5, b5], TOL, STEP,
                    "affine_concat_lrelu", ["x0", "x1", "gamma", "beta"])


def _losses(rng):
    p = _projector(rng)
    params = CharbonnierParams()
    x = _leaf(_away_from_zero(rng, (2, 3, 4, 4)))
    yield gradcheck(lambda x: p(charbonnier(x, params)), [x], TOL, STEP, "charbonnier")
    a, b = _leaf(rng.random((2, 3, 4, 4))), _leaf(rng.random((2, 3, 4, 4)))
    yield gradcheck(lambda a, b: mean(charbonnier(sub(a, b), params)), [a, b], TOL, STEP,
                    "charbonnier_sub", ["a", "b"])
    h = w = 8
    img = _leaf(rng.random((2, 3, h, w)))
    flow = _leaf(_fractional_flow(rng, (2, 2, h, w), 2.5, h, w))
    yield gradcheck(lambda i, f: p(bilinear_warp(i, f)), [img, flow], TOL, STEP, "bilinear_warp", ["image", "flow"])
    f1 = _leaf(rng.random((2, 3, h, w)))
    yield gradcheck(lambda a, i, f: reconstruction_loss(a, bilinear_warp(i, f), params), [f1, img, flow], TOL, STEP,
                    "reconstruction_loss", ["frame1", "frame2", "flow"])


def _multiscale(rng):
    """The composed loss with respect to every pyramid level."""
    levels = 3
    size = 16
    frame1 = _leaf(rng.random((2, 3, size, size)))
    frame2 = _leaf(rng.random((2, 3, size, size)))
    pyramid = []
    for lvl in range(levels):
        s = size >> (levels - 1 - lvl)
        pyramid.append(_leaf(_fractional_flow(rng, (2, 2, s, s), 1.5, s, s)))
    weights = LossWeights((0.32, 0.08, 0.02))

    def fn(f1, f2, *flows):
        return multiscale_loss(list(flows), f1, f2, weights)

    labels = ["frame1", "frame2"] + [f"flow{lvl}" for lvl in range(levels)]
    yield gradcheck(fn, [frame1, frame2, *pyramid], TOL, STEP, "multiscale_loss", labels)

    def fn_masked(*flows):
        return multiscale_loss(list(flows), frame1, frame2, weights, border="mask")

    yield gradcheck(fn_masked, pyramid, TOL, STEP, "multiscale_loss_masked",
                    [f"flow{lvl}" for lvl in range(levels)])


def network_check(seed=0, samples=NETWORK_SAMPLES, tol=TOL):
    """Whole network + loss gradient on randomly sampled parameter entries.

    A small configuration with the full topology (two blocks each way,
    train-mode batch norm, dropout with a fixed mask) keeps the probe cheap.
    Flow heads are given non-zero weights so every path carries gradient.
    """
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(growth_rate=4, num_blocks_down=2, num_blocks_up=2, layers_per_block=2,
                        initial_channels=4, flow_levels=3)
    net = build(cfg, rng=rng, dtype=np.float64)
    for name, prm in net.params.items():
        if name.startswith("head"):
            prm.data[...] = rng.standard_normal(prm.shape) * 0.05
    f1 = rng.random((2, 3, 16, 16))
    f2 = rng.random((2, 3, 16, 16))
    weights = LossWeights((0.32, 0.08, 0.02))

    def fn(*_):
        pyramid = net.forward(f1, f2, training=True, rng=np.random.default_rng(seed + 1))
        return multiscale_loss(pyramid, f1, f2, weights)

    names = list(net.params)
    sizes = np.array([net.params[n].size for n in names])
    flat = rng.choice(int(sizes.sum()), size=samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = []
    for k in sorted(flat):
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        picks.append((i, int(k - offsets[i])))

    inputs = [net.params[n] for n in names]
    net.zero_grad()
    fn().backward()
    analytic = np.array([0.0 if inputs[i].grad is None else inputs[i].grad.reshape(-1)[j] for i, j in picks])
    numeric = np.array([numerical_gradient(fn, inputs, i, STEP, [j])[0] for i, j in picks])
    report = GradcheckReport(name=f"network_{samples}_params", tol=tol)
    report.errors.append(("params", relative_error(analytic, numeric)))
    return report


GROUPS = (_elementwise, _layout, _activations, _convolutions, _pooling, _normalization, _losses, _multiscale)


def run_suite(seed=0, include_network=True):
    """All reports, in a fixed order; a pure function of ``seed``."""
    rng = np.random.default_rng(seed)
    reports = []
    for group in GROUPS:
        reports.extend(group(rng))
    if include_network:
        reports.append(network_check(seed))
    return reports

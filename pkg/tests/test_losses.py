import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denseflow.autodiff import Tensor
from denseflow.losses import (
    DEFAULT_LOSS_WEIGHTS,
    CharbonnierParams,
    LossWeights,
    bilinear_warp,
    charbonnier,
    image_pyramid,
    multiscale_loss,
    reconstruction_loss,
)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def bilinear_loop(img, u, v):
    """Per-pixel bilinear sample of img (H, W) at (y + v, x + u), border clamped."""
    h, w = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            sx = min(max(x + u[y, x], 0.0), w - 1.0)
            sy = min(max(y + v[y, x], 0.0), h - 1.0)
            x0, y0 = int(np.floor(sx)), int(np.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            ax, ay = sx - x0, sy - y0
            top = img[y0, x0] * (1 - ax) + img[y0, x1] * ax
            bot = img[y1, x0] * (1 - ax) + img[y1, x1] * ax
            out[y, x] = top * (1 - ay) + bot * ay
    return out


def test_charbonnier_constants():
    p = CharbonnierParams(0.25, 0.001)
    assert charbonnier(t64(0.0), p).item() == pytest.approx(0.0316228, abs=1e-7)
    assert charbonnier(t64(1.0), p).item() == pytest.approx(1.00000025, abs=1e-7)


def test_charbonnier_rejects_non_positive():
    with pytest.raises(ValueError):
        CharbonnierParams(0.0, 0.001)


def test_zero_flow_warp_is_identity(rng):
    img = rng.random((2, 3, 8, 9))
    out = bilinear_warp(t64(img), np.zeros((2, 2, 8, 9))).data
    np.testing.assert_allclose(out, img, atol=1e-6)


def test_integer_shift_matches_indexing(rng):
    img = rng.random((1, 2, 10, 12))
    flow = np.zeros((1, 2, 10, 12))
    flow[:, 0], flow[:, 1] = 2.0, -1.0
    out = bilinear_warp(t64(img), flow).data
    # interior: output (y, x) = img(y - 1, x + 2)
    np.testing.assert_array_equal(out[:, :, 1:, :-2], img[:, :, :-1, 2:])


def test_ramp_fractional_shift():
    ramp = np.tile(np.arange(8.0), (8, 1))[None, None]
    flow = np.zeros((1, 2, 8, 8))
    flow[:, 0] = 0.3
    out = bilinear_warp(t64(ramp), flow).data
    # a linear ramp is reproduced exactly by bilinear sampling
    np.testing.assert_allclose(out[0, 0, :, :-1], ramp[0, 0, :, :-1] + 0.3, atol=1e-6)


def test_warp_matches_loop_oracle(rng):
    img = rng.random((1, 1, 7, 6))
    flow = rng.uniform(-3, 3, size=(1, 2, 7, 6))
    out = bilinear_warp(t64(img), flow).data
    np.testing.assert_allclose(out[0, 0], bilinear_loop(img[0, 0], flow[0, 0], flow[0, 1]), atol=1e-12)


def test_warp_mask_marks_inside():
    flow = np.zeros((1, 2, 4, 4))
    flow[0, 0, 0, 0] = -0.5
    flow[0, 1, 3, 3] = 0.5
    _, inside = bilinear_warp(t64(np.zeros((1, 1, 4, 4))), flow, return_mask=True)
    assert inside.shape == (1, 1, 4, 4)
    assert inside[0, 0, 0, 0] == 0.0 and inside[0, 0, 3, 3] == 0.0
    assert inside.sum() == 14


def test_warp_shape_mismatch():
    with pytest.raises(ValueError):
        bilinear_warp(t64(np.zeros((1, 3, 4, 4))), np.zeros((1, 2, 4, 5)))


def test_reconstruction_loss_identical_frames():
    f = np.random.default_rng(0).random((1, 3, 4, 4))
    loss = reconstruction_loss(t64(f), t64(f))
    assert loss.item() == pytest.approx(0.001**0.5)


def test_reconstruction_loss_mask():
    f1 = np.zeros((1, 1, 2, 2))
    f2 = np.zeros((1, 1, 2, 2))
    f2[0, 0, 0, 0] = 1.0
    mask = np.ones((1, 1, 2, 2))
    mask[0, 0, 0, 0] = 0.0
    loss = reconstruction_loss(t64(f1), t64(f2), mask=mask)
    assert loss.item() == pytest.approx(0.001**0.5)
    with pytest.raises(ValueError):
        reconstruction_loss(t64(f1), t64(f2), mask=np.zeros((1, 1, 2, 2)))


def test_image_pyramid_extents():
    levels = image_pyramid(t64(np.zeros((1, 3, 64, 64))), 5)
    assert [lvl.shape[-1] for lvl in levels] == [4, 8, 16, 32, 64]


def test_loss_weights_validation():
    assert tuple(LossWeights()) == DEFAULT_LOSS_WEIGHTS
    with pytest.raises(ValueError):
        LossWeights((0.0, 0.0))
    with pytest.raises(ValueError):
        LossWeights((1.0, -0.1))


def _pyramid(rng, levels=3, size=16, n=1):
    return [t64(rng.uniform(-1, 1, size=(n, 2, size >> (levels - 1 - k), size >> (levels - 1 - k))))
            for k in range(levels)]


def test_multiscale_one_hot_finest_equals_single_scale(rng):
    f1, f2 = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
    pyr = _pyramid(rng)
    total = multiscale_loss(pyr, f1, f2, LossWeights((0.0, 0.0, 1.0))).item()
    single = reconstruction_loss(t64(f1), bilinear_warp(t64(f2), pyr[-1])).item()
    assert total == pytest.approx(single, rel=1e-12)


def test_multiscale_linear_in_weights(rng):
    f1, f2 = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
    pyr = _pyramid(rng)
    w = LossWeights((0.32, 0.08, 0.02))
    assert multiscale_loss(pyr, f1, f2, w.scaled(2.0)).item() == pytest.approx(
        2.0 * multiscale_loss(pyr, f1, f2, w).item(), rel=1e-12)


def test_multiscale_per_scale_breakdown(rng):
    f1, f2 = rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16))
    pyr = _pyramid(rng)
    w = LossWeights((0.32, 0.08, 0.02))
    total, scales = multiscale_loss(pyr, f1, f2, w, per_scale=True)
    assert len(scales) == 3
    assert total.item() == pytest.approx(sum(a * b for a, b in zip(w, scales)), rel=1e-12)


def test_multiscale_level_count_mismatch(rng):
    with pytest.raises(ValueError):
        multiscale_loss(_pyramid(rng), rng.random((1, 3, 16, 16)), rng.random((1, 3, 16, 16)))


def test_multiscale_zero_flow_identical_frames(rng):
    f = rng.random((2, 3, 16, 16))
    pyr = [t64(np.zeros((2, 2, s, s))) for s in (4, 8, 16)]
    w = LossWeights((0.32, 0.08, 0.02))
    assert multiscale_loss(pyr, f, f, w).item() == pytest.approx(sum(w) * 0.001**0.5, abs=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_constant_flow_warp_matches_oracle(u, v, seed):
    img = np.random.default_rng(seed).random((1, 1, 6, 6))
    flow = np.zeros((1, 2, 6, 6))
    flow[0, 0], flow[0, 1] = u, v
    out = bilinear_warp(t64(img), flow).data[0, 0]
    np.testing.assert_allclose(out, bilinear_loop(img[0, 0], flow[0, 0], flow[0, 1]), atol=1e-12)


def test_nan_flow_propagates_instead_of_crashing():
    img = np.random.default_rng(0).random((1, 1, 4, 4))
    flow = np.zeros((1, 2, 4, 4))
    flow[0, 0, 1, 2] = np.nan
    out = bilinear_warp(img, flow).data
    assert np.isnan(out[0, 0, 1, 2])
    assert np.isfinite(np.delete(out.ravel(), 6)).all()

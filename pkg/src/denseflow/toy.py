"""Procedural frame pairs with exact ground-truth flow.

A sample is a stack of layers rendered back to front: a full-frame textured
background and a few textured rectangles or discs.  Each layer moves by its
own displacement d, so frame2(q + d) = frame1(q) for every pixel q owned by
that layer in both frames.  The ground truth at q is the displacement of the
topmost layer covering q in frame 1.  Pixels whose match leaves the frame or
is covered by another layer in frame 2 are marked invalid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import ConfigError
from .data import FlowSample

# toy frames must suit the default network (four 2x poolings)
SIZE_MULTIPLE = 16


@dataclass(frozen=True)
class ToyConfig:
    size: int = 64
    num_shapes: int = 3
    shape_min: int = 12
    shape_max: int = 28
    max_displacement: float = 5.0
    # passes of the 3x3 box filter applied to the texture noise
    texture_smoothing: int = 12
    integer_displacement: bool = False
    # fixed (u, v) for the background instead of a random draw
    background_displacement: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.size < SIZE_MULTIPLE or self.size % SIZE_MULTIPLE:
            raise ConfigError(f"toy size must be a positive multiple of {SIZE_MULTIPLE}, got {self.size}")
        if not 0 <= self.max_displacement < self.size / 4:
            raise ConfigError(
                f"max_displacement must lie in [0, size/4 = {self.size / 4}), got {self.max_displacement}"
            )
        if self.num_shapes < 0:
            raise ConfigError("num_shapes must be >= 0")
        if not 1 <= self.shape_min <= self.shape_max < self.size:
            raise ConfigError(f"need 1 <= shape_min <= shape_max < size, got {self.shape_min}..{self.shape_max}")
        if self.texture_smoothing < 0:
            raise ConfigError("texture_smoothing must be >= 0")
        if self.background_displacement and len(self.background_displacement) != 2:
            raise ConfigError("background_displacement needs two values (u, v)")


def _texture(rng, extent, smoothing):
    """Smoothed noise with a random base colour, float64 (3, extent, extent)."""
    noise = rng.random((3, extent, extent))
    for _ in range(smoothing):
        noise = ndimage.uniform_filter(noise, size=(1, 3, 3), mode="reflect")
    centred = noise - noise.mean(axis=(1, 2), keepdims=True)
    spread = centred.std(axis=(1, 2), keepdims=True)
    base = rng.uniform(0.25, 0.75, size=(3, 1, 1))
    return np.clip(base + 0.15 * centred / np.maximum(spread, 1e-12), 0.0, 1.0)


def _displacement(rng, max_disp, integer):
    r = max_disp * math.sqrt(rng.random())
    a = rng.uniform(0.0, 2.0 * math.pi)
    d = np.array([r * math.cos(a), r * math.sin(a)])
    if integer:
        d = np.trunc(d)
    return d


class _Layer:
    def __init__(self, texture, disp, margin, shape=None):
        self.texture = texture
        self.u, self.v = float(disp[0]), float(disp[1])
        self.margin = margin
        # (kind, cy, cx, half_h, half_w) or None for the full-frame background
        self.shape = shape

    def covers(self, ys, xs):
        """Whether the layer's frame-1 footprint contains the points (ys, xs)."""
        if self.shape is None:
            return np.ones(np.broadcast(ys, xs).shape, dtype=bool)
        kind, cy, cx, hh, hw = self.shape
        if kind == "disc":
            return (ys - cy) ** 2 + (xs - cx) ** 2 <= hh * hh
        return (np.abs(ys - cy) <= hh) & (np.abs(xs - cx) <= hw)

    def sample(self, ys, xs):
        """Texture at frame-1 positions (ys, xs), bilinear."""
        coords = [ys + self.margin, xs + self.margin]
        return np.stack([ndimage.map_coordinates(ch, coords, order=1, mode="nearest")
                         for ch in self.texture])


def _layers(cfg, rng):
    margin = int(math.ceil(cfg.max_displacement)) + 2
    extent = cfg.size + 2 * margin
    layers = []
    if cfg.background_displacement:
        bg = np.asarray(cfg.background_displacement, dtype=np.float64)
    else:
        bg = _displacement(rng, cfg.max_displacement, cfg.integer_displacement)
    layers.append(_Layer(_texture(rng, extent, cfg.texture_smoothing), bg, margin))
    for _ in range(cfg.num_shapes):
        kind = "disc" if rng.random() < 0.5 else "rect"
        cy, cx = rng.uniform(0, cfg.size - 1, size=2)
        hh, hw = rng.uniform(cfg.shape_min, cfg.shape_max, size=2) / 2
        disp = _displacement(rng, cfg.max_displacement, cfg.integer_displacement)
        layers.append(_Layer(_texture(rng, extent, cfg.texture_smoothing), disp, margin,
                             (kind, cy, cx, hh, hw)))
    return layers


def _top_layer(layers, ys, xs, frame2):
    """Index of the topmost layer at each point, in frame 1 or frame 2 coordinates."""
    top = np.zeros(np.broadcast(ys, xs).shape, dtype=np.intp)
    for k, layer in enumerate(layers[1:], start=1):
        py, px = (ys - layer.v, xs - layer.u) if frame2 else (ys, xs)
        top[layer.covers(py, px)] = k
    return top


def _render(layers, top, ys, xs, frame2):
    out = np.zeros((3,) + top.shape)
    for k, layer in enumerate(layers):
        sel = top == k
        if not sel.any():
            continue
        py, px = (ys[sel] - layer.v, xs[sel] - layer.u) if frame2 else (ys[sel], xs[sel])
        out[:, sel] = layer.sample(py, px)
    return out


def gen_toy_pair(cfg: ToyConfig, rng) -> FlowSample:
    """One procedural sample; a pure function of ``cfg`` and the generator state."""
    layers = _layers(cfg, rng)
    n = cfg.size
    ys, xs = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    top1 = _top_layer(layers, ys, xs, frame2=False)
    top2 = _top_layer(layers, ys, xs, frame2=True)
    frame1 = _render(layers, top1, ys, xs, frame2=False)
    frame2 = _render(layers, top2, ys, xs, frame2=True)
    u = np.array([layer.u for layer in layers])[top1]
    v = np.array([layer.v for layer in layers])[top1]
    ty, tx = ys + v, xs + u
    inside = (tx >= 0) & (tx <= n - 1) & (ty >= 0) & (ty <= n - 1)
    visible = _top_layer(layers, ty, tx, frame2=True) == top1
    return FlowSample(
        frame1.astype(np.float32),
        frame2.astype(np.float32),
        np.stack([u, v]).astype(np.float32),
        inside & visible,
    )


def gen_toy_dataset(cfg: ToyConfig, count):
    """``count`` samples; sample i depends only on (cfg, cfg.seed, i)."""
    out = []
    for i in range(count):
        sample = gen_toy_pair(cfg, np.random.default_rng([cfg.seed, i]))
        out.append(FlowSample(sample.frame1, sample.frame2, sample.gt_flow, sample.valid_mask, f"{i:05d}"))
    return out

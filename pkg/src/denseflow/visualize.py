"""Flow fields rendered on the Middlebury colour wheel.

Hue encodes direction and saturation encodes magnitude relative to
``max_mag``.  Angle 0 (pure +u, rightward) is red, and the hue advances with
atan2(v, u), v pointing down.  Vectors longer than ``max_mag`` are drawn
darker; zero flow is white.
"""

from __future__ import annotations

import numpy as np

# segment lengths of the wheel: red-yellow, yellow-green, green-cyan,
# cyan-blue, blue-magenta, magenta-red
_SEGMENTS = (15, 6, 4, 11, 13, 6)


def color_wheel():
    """(55, 3) float array of wheel colours in [0, 1]."""
    ry, yg, gc, cb, bm, mr = _SEGMENTS
    cols = []
    for i in range(ry):
        cols.append((1.0, i / ry, 0.0))
    for i in range(yg):
        cols.append((1.0 - i / yg, 1.0, 0.0))
    for i in range(gc):
        cols.append((0.0, 1.0, i / gc))
    for i in range(cb):
        cols.append((0.0, 1.0 - i / cb, 1.0))
    for i in range(bm):
        cols.append((i / bm, 0.0, 1.0))
    for i in range(mr):
        cols.append((1.0, 0.0, 1.0 - i / mr))
    return np.array(cols)


def wheel_position(u, v):
    """Fractional wheel index in [0, ncols) for direction atan2(v, u)."""
    ncols = sum(_SEGMENTS)
    angle = np.mod(np.arctan2(v, u), 2.0 * np.pi)
    return angle / (2.0 * np.pi) * ncols


def flow_to_color(flow, max_mag=None):
    """(2, H, W) flow -> ((H, W, 3) uint8 image, max_mag used).

    ``max_mag`` defaults to the field's own largest magnitude.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be shaped (2, H, W), got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    u, v = flow
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(mag.max())
    if max_mag < 0:
        raise ValueError("max_mag must be non-negative")
    r = mag / max_mag if max_mag > 0 else np.zeros_like(mag)

    wheel = color_wheel()
    ncols = len(wheel)
    fk = wheel_position(u, v)
    k0 = np.floor(fk).astype(int) % ncols
    k1 = (k0 + 1) % ncols
    f = (fk - np.floor(fk))[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    inside = (r <= 1)[..., None]
    rr = r[..., None]
    col = np.where(inside, 1 - rr * (1 - col), col * 0.75)
    return np.rint(col * 255).astype(np.uint8), max_mag

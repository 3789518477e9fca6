"""Flow and image file formats.

* ``.flo`` (Middlebury): little-endian float32 sentinel 202021.25, int32
  width, int32 height, then row-major interleaved (u, v) float32 pairs.
* Binary PNM: P6 (RGB) and P5 (gray), maxval 255.  Images are returned as
  float32 arrays in [0, 1] shaped (C, H, W).
* 16-bit P6 (maxval 65535, big-endian samples), the default decoder behind
  :func:`read_kitti_flow`.  Any callable returning a (H, W, 3) uint16 array
  can be passed instead (for example a PNG codec).

Flow fields are (2, H, W) arrays, channel 0 horizontal (u), channel 1
vertical (v).  Readers validate everything before returning, so a failed read
never yields a partial result.
"""

from __future__ import annotations

import os

import numpy as np

FLO_SENTINEL = np.float32(202021.25)
_FLO_HEADER = 12


class FormatError(ValueError):
    """File does not follow the expected format."""


class TruncationError(FormatError):
    """Header and payload size disagree."""


# -- .flo ------------------------------------------------------------------


def write_flo(path, flow):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be shaped (2, H, W), got {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValueError("flow contains non-finite values")
    _, h, w = flow.shape
    header = FLO_SENTINEL.astype("<f4").tobytes() + np.array([w, h], dtype="<i4").tobytes()
    payload = np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)


def decode_flo(buf, name="<bytes>"):
    if len(buf) < _FLO_HEADER:
        raise TruncationError(f"{name}: {len(buf)} bytes is shorter than the .flo header")
    sentinel = np.frombuffer(buf, dtype="<f4", count=1)[0]
    if sentinel != FLO_SENTINEL:
        raise FormatError(f"{name}: bad .flo sentinel {sentinel!r}")
    w, h = (int(v) for v in np.frombuffer(buf, dtype="<i4", count=2, offset=4))
    if w < 1 or h < 1:
        raise FormatError(f"{name}: invalid .flo extent {w}x{h}")
    expected = _FLO_HEADER + 8 * w * h
    if len(buf) != expected:
        raise TruncationError(f"{name}: {w}x{h} field needs {expected} bytes, file has {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=_FLO_HEADER).reshape(h, w, 2)
    return data.transpose(2, 0, 1).astype(np.float32)


def read_flo(path):
    with open(path, "rb") as fh:
        return decode_flo(fh.read(), os.fspath(path))


# -- PNM -------------------------------------------------------------------


def _pnm_header(buf, name):
    """Parse magic, width, height, maxval; return them and the payload offset."""
    pos = 0
    tokens = []
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{name}: truncated PNM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{name}: missing whitespace after PNM maxval")
    magic = tokens[0].decode("ascii", "replace")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{name}: non-numeric PNM header fields {tokens[1:]}") from None
    if width < 1 or height < 1:
        raise FormatError(f"{name}: invalid PNM extent {width}x{height}")
    return magic, width, height, maxval, pos + 1


def _read_pnm(buf, name, magic_wanted, channels, maxval_wanted):
    magic, width, height, maxval, offset = _pnm_header(buf, name)
    if magic != magic_wanted:
        raise FormatError(f"{name}: expected {magic_wanted} magic, got {magic!r}")
    if maxval != maxval_wanted:
        raise FormatError(f"{name}: expected maxval {maxval_wanted}, got {maxval}")
    dtype = np.dtype(">u2") if maxval_wanted > 255 else np.dtype("u1")
    expected = width * height * channels * dtype.itemsize
    if len(buf) - offset != expected:
        raise TruncationError(
            f"{name}: raster needs {expected} bytes, found {len(buf) - offset}"
        )
    return np.frombuffer(buf, dtype=dtype, offset=offset).reshape(height, width, channels)


def read_ppm(path):
    """P6, maxval 255 -> float32 (3, H, W) in [0, 1]."""
    with open(path, "rb") as fh:
        raw = _read_pnm(fh.read(), os.fspath(path), "P6", 3, 255)
    return (raw.transpose(2, 0, 1) / np.float32(255)).astype(np.float32)


def read_pgm(path):
    """P5, maxval 255 -> float32 (1, H, W) in [0, 1]."""
    with open(path, "rb") as fh:
        raw = _read_pnm(fh.read(), os.fspath(path), "P5", 1, 255)
    return (raw.transpose(2, 0, 1) / np.float32(255)).astype(np.float32)


def _to_bytes(image, channels):
    image = np.asarray(image)
    if image.ndim == 2 and channels == 1:
        image = image[None]
    if image.ndim != 3 or image.shape[0] != channels:
        raise ValueError(f"expected a ({channels}, H, W) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def _write_pnm(path, magic, raster):
    h, w = raster.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(raster).tobytes())


def write_ppm(path, image):
    """(3, H, W) floats in [0, 1] -> P6, rounding to the nearest byte."""
    _write_pnm(path, "P6", _to_bytes(image, 3))


def write_pgm(path, image):
    """(H, W) or (1, H, W) floats in [0, 1] -> P5."""
    _write_pnm(path, "P5", _to_bytes(image, 1))


def read_mask(path):
    """P5 validity mask (255 = valid) -> bool (H, W)."""
    return read_pgm(path)[0] > 0.5


def write_mask(path, mask):
    write_pgm(path, np.asarray(mask, dtype=np.float32))


def read_ppm16(path):
    """16-bit P6 (maxval 65535) -> uint16 (H, W, 3)."""
    with open(path, "rb") as fh:
        raw = _read_pnm(fh.read(), os.fspath(path), "P6", 3, 65535)
    return raw.astype(np.uint16)


def write_ppm16(path, raster):
    raster = np.asarray(raster)
    if raster.dtype != np.uint16 or raster.ndim != 3 or raster.shape[2] != 3:
        raise ValueError(f"expected a (H, W, 3) uint16 raster, got {raster.dtype} {raster.shape}")
    h, w = raster.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(raster.astype(">u2").tobytes())


# -- KITTI -------------------------------------------------------------------


def decode_kitti_flow(raster):
    """(H, W, 3) uint16 KITTI encoding -> ((2, H, W) flow, (H, W) valid mask).

    u = (ch1 - 32768) / 64, v = (ch2 - 32768) / 64, valid = ch3 > 0; invalid
    pixels carry zero flow.
    """
    raster = np.asarray(raster)
    if raster.dtype != np.uint16:
        raise FormatError(f"KITTI flow needs 16-bit samples, got {raster.dtype}")
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise FormatError(f"KITTI flow needs 3 channels, got shape {raster.shape}")
    valid = raster[..., 2] > 0
    flow = (raster[..., :2].astype(np.float32) - np.float32(32768)) / np.float32(64)
    flow[~valid] = 0.0
    return flow.transpose(2, 0, 1).copy(), valid


def encode_kitti_flow(flow, valid):
    """Inverse of :func:`decode_kitti_flow` (values rounded to 1/64 px)."""
    flow = np.asarray(flow, dtype=np.float64)
    raw = np.rint(flow.transpose(1, 2, 0) * 64.0 + 32768.0)
    if raw.min() < 0 or raw.max() > 65535:
        raise ValueError("flow magnitude exceeds the 16-bit KITTI range")
    out = np.zeros(flow.shape[1:] + (3,), dtype=np.uint16)
    out[..., :2] = raw.astype(np.uint16)
    out[..., 2] = np.asarray(valid, dtype=bool)
    out[~np.asarray(valid, dtype=bool), :2] = 32768
    return out


def read_kitti_flow(path, decoder=read_ppm16):
    """Decode a KITTI flow image; ``decoder`` maps a path to (H, W, 3) uint16."""
    return decode_kitti_flow(decoder(path))

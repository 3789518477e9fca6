"""Binary checkpoints.

Layout (all integers little-endian)::

    b"DFLW"  u32 version  32-byte sha256 of the network config text
    u32 n + n bytes   network config text (utf-8)
    u64 iteration     u64 adam step t
    u32 n + n bytes   metadata JSON (RNG state, training settings)
    u32 tensor count
    per tensor: u16 n + n bytes name, u8 ndim, ndim x u32 extent, float32 data
    u32 crc32 of everything above

Tensors appear in a fixed order: parameters, buffers, then Adam moments as
``adam.m.<name>`` and ``adam.v.<name>``.  Saving what was loaded reproduces the
file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .network import NetworkConfig

MAGIC = b"DFLW"
VERSION = 1


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    """Bad magic, truncated file, checksum failure or malformed fields."""


class VersionMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass(eq=False)
class Checkpoint:
    config: NetworkConfig
    params: dict
    buffers: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    iteration: int
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def tensors(self):
        yield from self.params.items()
        yield from self.buffers.items()
        for name, arr in self.adam_m.items():
            yield f"adam.m.{name}", arr
        for name, arr in self.adam_v.items():
            yield f"adam.v.{name}", arr


def encode(ckpt: Checkpoint) -> bytes:
    config_text = ckpt.config.to_text().encode("utf-8")
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tensors = list(ckpt.tensors())
    parts = [
        MAGIC,
        struct.pack("<I", ckpt.version),
        hashlib.sha256(config_text).digest(),
        struct.pack("<I", len(config_text)),
        config_text,
        struct.pack("<QQ", ckpt.iteration, ckpt.adam_t),
        struct.pack("<I", len(meta)),
        meta,
        struct.pack("<I", len(tensors)),
    ]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(path, ckpt: Checkpoint):
    """Write atomically: a partial file never replaces a good one."""
    data = encode(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf, expected_config: NetworkConfig | None = None) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CorruptCheckpointError("not a checkpoint: bad magic")
    if len(buf) < 8:
        raise CorruptCheckpointError("truncated checkpoint header")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads version {VERSION}")
    if len(buf) < 12:
        raise CorruptCheckpointError("truncated checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError("checksum mismatch (truncated or damaged file)")
    r = _Reader(body)
    r.take(8)
    digest = r.take(32)
    (n,) = r.unpack("<I")
    config_raw = r.take(n)
    if hashlib.sha256(config_raw).digest() != digest:
        raise CorruptCheckpointError("config digest does not match the stored config text")
    try:
        config = NetworkConfig.from_text(config_raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CorruptCheckpointError(f"unreadable network config: {exc}") from None
    if expected_config is not None and config.digest() != expected_config.digest():
        raise ConfigMismatchError(
            f"checkpoint config digest {config.digest()} differs from expected {expected_config.digest()}"
        )
    iteration, adam_t = r.unpack("<QQ")
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, ValueError):
        raise CorruptCheckpointError("unreadable metadata") from None
    (count,) = r.unpack("<I")
    params, buffers, adam_m, adam_v = {}, {}, {}, {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8", "replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith("adam.m."):
            adam_m[name[7:]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[7:]] = arr
        elif ".norm.running_" in name:
            buffers[name] = arr
        else:
            params[name] = arr
    if r.pos != len(body):
        raise CorruptCheckpointError(f"{len(body) - r.pos} trailing bytes after the tensor table")
    return Checkpoint(config, params, buffers, adam_m, adam_v, adam_t, iteration, meta, version)


def load_checkpoint(path, expected_config: NetworkConfig | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read(), expected_config)

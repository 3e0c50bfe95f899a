"""Binary checkpoints.

Byte layout, all integers little-endian:

    8 bytes   magic b"FSDFCKPT"
    u32       format version (1)
    32 bytes  config hash (sha256 digest of the stage's settings)
    u64       metadata length L, then L bytes of UTF-8 JSON (sorted keys)
    u32       number of arrays
    per array:
        u32   name length, then the UTF-8 name
        u32   ndim, then ndim x u64 dimensions
        prod(dims) x f64 values in C order

Array names are prefixed by role: ``encoder.``, ``theta.``, ``alpha.``,
``adam_*`` for optimizer state.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"FSDFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_hash: str
    metadata: dict = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under ``prefix.`` with the prefix stripped, in stored order."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}

    def has_group(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.arrays)


def to_bytes(ckpt: Checkpoint) -> bytes:
    digest = bytes.fromhex(ckpt.config_hash)
    if len(digest) != 32:
        raise CheckpointError("config hash must be 32 bytes (64 hex digits)")
    meta = json.dumps(ckpt.metadata, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    buf.write(digest)
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        a = np.asarray(arr, dtype="<f8")  # ascontiguousarray would turn 0-d into 1-d
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated checkpoint")
        out = bytes(view[pos : pos + n])
        pos += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    digest = take(32).hex()
    (mlen,) = struct.unpack("<Q", take(8))
    metadata = json.loads(take(mlen).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(view):
        raise CheckpointError(f"{source}: trailing bytes after the last array")
    return Checkpoint(digest, metadata, arrays, version)


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically (temporary file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data, str(path))


def check_hash(ckpt: Checkpoint, expected: str, what: str) -> None:
    if ckpt.config_hash != expected:
        raise CheckpointError(
            f"{what}: configuration hash mismatch (checkpoint {ckpt.config_hash[:12]}..., "
            f"current config {expected[:12]}...); the settings that produced it differ"
        )

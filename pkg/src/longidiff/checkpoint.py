"""Binary checkpoint: a fixed header followed by named float32 tensor records.

Layout (all integers little-endian)::

    magic        8 bytes   b"LDIFFCK\\0"
    version      u32       1
    config hash  32 bytes  raw SHA-256 digest
    step         u64
    n_records    u32
    record * n_records:
        name_len u16, name (UTF-8), ndim u8, dims (u32 * ndim),
        data     float32 little-endian, row-major

Optimizer moments are stored as ordinary records named ``adam.m.<param>``
and ``adam.v.<param>``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"LDIFFCK\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_hash: str
    step: int
    tensors: dict[str, np.ndarray]


def to_bytes(ckpt: Checkpoint) -> bytes:
    digest = bytes.fromhex(ckpt.config_hash)
    if len(digest) != 32:
        raise CheckpointError("config hash must be a 64-character hex SHA-256 digest")
    out = [MAGIC, struct.pack("<I", VERSION), digest, struct.pack("<QI", ckpt.step, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = buf[12:44].hex()
    step, n = struct.unpack_from("<QI", buf, 44)
    pos = 56
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise CheckpointError(f"record {name!r} truncated")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last record")
    return Checkpoint(digest, int(step), tensors)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load(path: str | Path, expect_hash: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    ckpt = from_bytes(path.read_bytes())
    if expect_hash is not None and ckpt.config_hash != expect_hash:
        raise CheckpointError(f"config hash mismatch: checkpoint {ckpt.config_hash[:12]}, config {expect_hash[:12]}")
    return ckpt


def split_state(tensors: dict[str, np.ndarray]) -> tuple[dict, dict, dict]:
    """Separate model parameters from the Adam first and second moments."""
    params, m, v = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("adam.m."):
            m[name[7:]] = arr
        elif name.startswith("adam.v."):
            v[name[7:]] = arr
        else:
            params[name] = arr
    return params, m, v

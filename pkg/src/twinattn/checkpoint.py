"""Flat binary checkpoint archive.

Layout (all integers little-endian)::

    magic      8 bytes  b"TWINCKPT"
    version    u32
    cfg_hash   32 bytes  sha256 of the canonical model config
    count      u32
    records    count x (name_len u32, name utf-8, rows u64, cols u64,
                        rows*cols float64 little-endian)

Vectors are stored as a single row. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TWINCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_hash(config: dict) -> bytes:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


def dumps(arrays: dict, config: dict) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION), config_hash(config), struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        value = np.asarray(value, dtype=np.float64)
        if value.ndim > 2:
            raise CheckpointError(f"{name}: only vectors and matrices can be stored, got {value.shape}")
        rows, cols = (1, value.shape[0]) if value.ndim == 1 else value.shape
        encoded = name.encode()
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<QQ", rows, cols))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(chunks)


def loads(blob: bytes, config: dict | None = None) -> dict:
    """Parse an archive into ``{name: (rows, cols) float64 array}``.

    When ``config`` is given its hash must match the stored one.
    """
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint archive")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored_hash = blob[12:44]
    if config is not None and stored_hash != config_hash(config):
        raise CheckpointError("checkpoint was written for a different model config")
    (count,) = struct.unpack_from("<I", blob, 44)
    pos, out = 48, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + n].decode()
        pos += n
        rows, cols = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        nbytes = 8 * rows * cols
        out[name] = np.frombuffer(blob[pos : pos + nbytes], dtype="<f8").reshape(rows, cols).astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last record")
    return out


def save(path, arrays: dict, config: dict) -> None:
    Path(path).write_bytes(dumps(arrays, config))


def load(path, config: dict | None = None) -> dict:
    return loads(Path(path).read_bytes(), config)


def stored_hash(path) -> bytes:
    return Path(path).read_bytes()[12:44]

"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"Y2NETCKP"
    8       2     u16 format version (currently 1)
    10      4     u32 header length H
    14      H     header, UTF-8 JSON object {"config": ..., "meta": ...}
    14+H    32    SHA-256 of the canonical config JSON (sorted keys, no spaces)
    46+H    4     u32 number of parameter records R
    then R records:
            2     u16 name length L
            L     name, UTF-8
            1     u8  ndim D
            4*D   u32 dims
            4*P   float32 values, row-major, P = prod(dims)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"Y2NETCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_digest(config: dict) -> bytes:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(canon).digest()


def save_checkpoint(path, params: dict, config: dict, meta: dict | None = None) -> None:
    header = json.dumps({"config": config, "meta": meta or {}}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(header)), header, config_digest(config)]
    chunks.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype="<f4"))
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path, expect_config: dict | None = None) -> tuple[dict, dict, dict]:
    """Return ``(config, params, meta)``; ``params`` maps name -> float32 array."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a Y2NET checkpoint")
    version, hlen = struct.unpack_from("<HI", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 14
    header = json.loads(buf[pos : pos + hlen].decode())
    pos += hlen
    digest = buf[pos : pos + 32]
    pos += 32
    config = header["config"]
    if digest != config_digest(config):
        raise CheckpointError(f"{path}: config digest mismatch (corrupt header)")
    if expect_config is not None and config_digest(expect_config) != digest:
        raise CheckpointError(f"{path}: architecture does not match the requested config")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after parameter records")
    return config, params, header.get("meta", {})

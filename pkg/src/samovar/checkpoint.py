"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"SMVW1"
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims,
                row-major float32 payload
    u32 CRC32 of every preceding byte

The model configuration travels in a JSON sidecar next to the weights.
"""
from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"SMVW1"


def encode(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes) -> dict:
    if len(buf) < len(MAGIC) + 8:
        raise CheckpointError("checkpoint truncated (shorter than header + CRC)")
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("CRC mismatch; checkpoint is corrupt or truncated")
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(body):
                raise CheckpointError(f"payload of {name!r} runs past the end of the file")
            out[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(dims).copy()
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last tensor")
    return out


def save(path, tensors: dict, config: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(encode(tensors))
    if config is not None:
        with open(sidecar_path(path), "w", encoding="utf-8") as fh:
            json.dump(config, fh, indent=2)


def load(path) -> dict:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        return decode(fh.read())


def sidecar_path(path) -> str:
    return str(path) + ".json"


def load_config(path) -> dict:
    side = sidecar_path(path)
    if not os.path.exists(side):
        raise CheckpointError(f"checkpoint config sidecar not found: {side}")
    with open(side, encoding="utf-8") as fh:
        return json.load(fh)


def assign(weights: dict, tensors: dict):
    """Copy loaded arrays into model Tensors, checking names and shapes."""
    missing = set(weights) - set(tensors)
    extra = set(tensors) - set(weights)
    if missing or extra:
        raise CheckpointError(f"checkpoint tensors do not match the model: "
                              f"missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, t in weights.items():
        arr = tensors[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(f"shape mismatch for tensor {name!r}: checkpoint {arr.shape}, "
                                  f"model {t.data.shape}")
        t.data[...] = arr.astype(t.data.dtype)

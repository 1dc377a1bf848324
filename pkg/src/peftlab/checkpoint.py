"""Binary checkpoint format shared by backbone and adapter state.

Layout (all integers little-endian unsigned 32-bit, floats little-endian
IEEE-754 64-bit, row-major):

    magic   "PEFTCKPT1" (9 ascii bytes)
    u32     record count
    record* each:
        u32     tag length, then that many utf-8 bytes
                (tags carry the section and method, e.g. "backbone.wte",
                 "adapter.lora.layer0.attn.a", "meta.arch")
        u32     ndim
        u32[ndim] dims
        f64[prod(dims)] data

Records round-trip in order; `load` returns an insertion-ordered dict.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PEFTCKPT1"


class CheckpointError(ValueError):
    """File is not a well-formed PEFTCKPT1 checkpoint."""


def save(path, records: dict[str, np.ndarray] | list[tuple[str, np.ndarray]]) -> None:
    items = list(records.items()) if isinstance(records, dict) else list(records)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for tag, arr in items:
            arr = np.asarray(arr, dtype=np.float64)
            raw_tag = tag.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_tag)))
            fh.write(raw_tag)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a PEFTCKPT1 checkpoint")
    off = len(MAGIC)

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (count,) = take("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (tag_len,) = take("<I")
        if off + tag_len > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        tag = blob[off : off + tag_len].decode("utf-8")
        off += tag_len
        (ndim,) = take("<I")
        dims = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        if off + 8 * n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        out[tag] = data.reshape(dims)
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return out


def encode_text(s: str) -> np.ndarray:
    """Strings ride in float records as UTF-8 code units."""
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")

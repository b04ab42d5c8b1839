"""Flat binary parameter container.

Layout (little-endian, documented in docs/FORMATS.md and stable across
releases):

    bytes 0..8    magic b"DRCHKPT1"
    bytes 8..12   uint32 header length H
    bytes 12..12+H  UTF-8 JSON header:
        {"format_version": 1,
         "meta": {...},
         "tensors": [{"name": str, "shape": [...], "dtype": "f8",
                      "offset": int, "nbytes": int}, ...]}
    then the data section: float64 row-major blobs, concatenated in header
    order. Tensor names are sorted, offsets are relative to the data section,
    and the JSON is key-sorted, so identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DRCHKPT1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    """Data-section bytes alone (name-sorted); handy for byte-level diffing."""
    return b"".join(
        np.ascontiguousarray(tensors[name], dtype=np.float64).tobytes()
        for name in sorted(tensors)
    )


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None):
    names = sorted(tensors)
    entries = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        blob = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "f8",
            "offset": offset,
            "nbytes": len(blob),
        })
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    data = raw[12 + hlen:]
    tensors = {}
    for e in header["tensors"]:
        arr = np.frombuffer(
            data, dtype=np.float64, count=e["nbytes"] // 8, offset=e["offset"]
        ).reshape(e["shape"])
        tensors[e["name"]] = np.array(arr)  # own, writable copy
    return tensors, header["meta"]

"""Checkpoint files.

Layout: the 8 magic bytes ``ENSPOST1``, a little-endian u64 byte length,
a UTF-8 JSON metadata document of that length, then each entry's raw
little-endian values in the order listed under ``"entries"``.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"ENSPOST1"


def save_checkpoint(path, state: "OrderedDict[str, np.ndarray]", config: dict | None = None,
                    dtype: str | None = None) -> None:
    """Write ``state`` (name -> array, in declaration order).

    Values are stored as 32-bit floats unless ``dtype="<f8"`` is requested
    or any entry is already float64.
    """
    if dtype is None:
        dtype = "<f8" if any(np.asarray(v).dtype == np.float64 for v in state.values()) else "<f4"
    if dtype not in ("<f4", "<f8"):
        raise ValueError(f"unsupported checkpoint dtype {dtype}")
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in state.items()]
    meta = {"format": 1, "dtype": dtype, "config": config or {}, "entries": entries}
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for value in state.values():
            fh.write(np.ascontiguousarray(value, dtype=dtype).tobytes())


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    """Read a checkpoint; returns ``(state, config)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:8]!r})")
    (length,) = struct.unpack("<Q", raw[8:16])
    meta = json.loads(raw[16:16 + length].decode("utf-8"))
    dtype = np.dtype(meta["dtype"])
    offset = 16 + length
    state = OrderedDict()
    for entry in meta["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: truncated at entry {entry['name']}")
        state[entry["name"]] = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return state, meta["config"]

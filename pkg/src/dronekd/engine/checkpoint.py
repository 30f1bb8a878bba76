"""Checkpoint container: named tensors plus a JSON metadata block.

Layout (all integers little-endian):

    bytes 0..6     magic ``DKDCKPT``
    byte  7        format version (1)
    uint64         header length in bytes
    header         UTF-8 JSON: {"meta": {...}, "tensors": [
                       {"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    payload        raw row-major little-endian tensor data, in header order

The header JSON uses sorted keys and compact separators, and no timestamps
are recorded, so identical inputs serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DKDCKPT"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    records = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype.name not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = arr.astype(_DTYPES[arr.dtype.name]).tobytes()
        records.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"meta": meta or {}, "tensors": records},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<B", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:7] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version = data[7]
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    base = 16 + header_len
    tensors = {}
    for rec in header["tensors"]:
        raw = data[base + rec["offset"] : base + rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[rec["dtype"]]).astype(rec["dtype"])
        tensors[rec["name"]] = arr.reshape(rec["shape"])
    return tensors, header["meta"]

"""Binary checkpoint container.

Layout (little-endian)::

    b"BCL1" | u64 manifest length | JSON manifest | raw buffers in manifest order

The manifest lists ``tensors`` as ``{name, shape, dtype}`` records plus any
caller metadata (epoch, seeds, encoder spec, ...).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

MAGIC = b"BCL1"
_ALLOWED = {"float32", "float64", "int64", "uint8", "bool"}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.name
        if dt not in _ALLOWED:
            raise CheckpointError(f"{name}: unsupported dtype {dt}")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt})
        blobs.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    manifest = dict(meta)
    manifest["tensors"] = entries
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_manifest(path) -> Tuple[Dict[str, Any], int]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        raw = fh.read(8)
        if len(raw) != 8:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", raw)
        header = fh.read(n)
        if len(header) != n:
            raise CheckpointError(f"{path}: truncated manifest")
    return json.loads(header.decode("utf-8")), 12 + n


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    manifest, offset = read_manifest(path)
    data = Path(path).read_bytes()
    arrays: Dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dt.itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated buffer for {entry['name']}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return arrays, manifest

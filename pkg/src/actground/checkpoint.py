"""Self-describing binary checkpoint container.

Byte layout (all integers little-endian):

    bytes 0-3   magic b"AGCK"
    bytes 4-7   format version (uint32)
    bytes 8-15  header length N (uint64)
    N bytes     UTF-8 JSON header:
                  {"config": {...},
                   "params": [{"name": str, "shape": [int], "dtype": str}, ...]}
    rest        parameter values, little-endian raw bytes, in header order

Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"AGCK"
VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(Exception):
    pass


def checkpoint_save(params, path, config=None):
    """Write named parameters (mapping name -> array or Parameter) to path."""
    items = []
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value))
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        items.append((name, arr))
    header = {
        "config": config or {},
        "params": [
            {"name": n, "shape": list(a.shape), "dtype": a.dtype.name}
            for n, a in items
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, a in items:
            f.write(np.ascontiguousarray(a, dtype=_DTYPES[a.dtype.name]).tobytes())


def checkpoint_load(path, expect_shapes=None):
    """Read a checkpoint; returns (dict name -> ndarray, config dict).

    If `expect_shapes` (name -> shape tuple) is given, every loaded
    parameter is validated against it.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from e
    offset = 16 + hlen
    out = {}
    for entry in header["params"]:
        name = entry["name"]
        shape = tuple(entry["shape"])
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = dt.itemsize * count
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data for parameter {name!r}")
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(shape)
        out[name] = arr.astype(entry["dtype"], copy=True)
        offset += nbytes
    if expect_shapes is not None:
        for name, shape in expect_shapes.items():
            if name not in out:
                raise CheckpointError(f"{path}: missing parameter {name!r}")
            if out[name].shape != tuple(shape):
                raise CheckpointError(
                    f"{path}: shape mismatch for parameter {name!r}: "
                    f"checkpoint {out[name].shape}, model {tuple(shape)}")
    return out, header["config"]

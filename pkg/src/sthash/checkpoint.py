"""Tagged binary checkpoint container.

Layout: magic "MSTH", format version u32, then a sequence of records
(name, dtype tag, shape, raw little-endian payload). Arbitrary metadata
(config, RNG state) rides along as JSON payloads under the "json" tag.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MSTH"
VERSION = 1


def _write_record(f, name: str, arr) -> None:
    name_b = name.encode()
    f.write(struct.pack("<H", len(name_b)))
    f.write(name_b)
    if isinstance(arr, (dict, list, str, int, float)):
        payload = json.dumps(arr).encode()
        tag = b"json    "
        shape = (len(payload),)
        raw = payload
    else:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        tag = dt.str.encode().ljust(8)
        shape = arr.shape
        raw = arr.astype(dt).tobytes()
    f.write(tag)
    f.write(struct.pack("<B", len(shape)))
    f.write(struct.pack(f"<{len(shape)}Q", *shape))
    f.write(struct.pack("<Q", len(raw)))
    f.write(raw)


def _read_record(f):
    head = f.read(2)
    if not head:
        return None
    (nlen,) = struct.unpack("<H", head)
    name = f.read(nlen).decode()
    tag = f.read(8).rstrip()
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim)) if ndim else ()
    (nbytes,) = struct.unpack("<Q", f.read(8))
    raw = f.read(nbytes)
    if tag == b"json":
        return name, json.loads(raw)
    arr = np.frombuffer(raw, dtype=np.dtype(tag.decode())).reshape(shape)
    return name, arr.copy()


def write_container(path, records: dict) -> None:
    with open(Path(path), "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, arr in records.items():
            _write_record(f, name, arr)


def read_container(path) -> dict:
    out = {}
    with open(Path(path), "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint container")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            rec = _read_record(f)
            if rec is None:
                break
            out[rec[0]] = rec[1]
    return out

"""Flat named-parameter checkpoints.

Layout::

    b"PLCK" | uint32 version | uint64 header_len | header (utf-8 JSON) | payload

The header lists every tensor's name, shape, dtype and byte offset into the
payload, plus free-form metadata (seed, model spec, adapter description).
Arrays are stored little-endian, C order.
"""

import json
import struct

import numpy as np

from .errors import DataError

MAGIC = b"PLCK"
VERSION = 1


def save_checkpoint(path, arrays, meta=None):
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name, "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path):
    """Returns ``(arrays, meta)`` with arrays in file order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[16 : 16 + hlen])
    payload = memoryview(blob)[16 + hlen :]
    arrays = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=dt).astype(np.dtype(e["dtype"])).reshape(e["shape"])
    return arrays, header["meta"]

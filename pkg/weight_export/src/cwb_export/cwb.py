"""Writer and reader for the CWB weight container.

Layout (bit-exact): bytes 0-3 magic "CWB1"; bytes 4-7 header length L
as unsigned 32-bit little-endian; bytes 8..8+L a UTF-8 JSON array of
{name, dtype:"f32", shape, offset, nbytes} entries with offsets
relative to the header end; then raw little-endian float32 blobs,
row-major, unpadded.  The tracker side of the pipeline reads this same
format; this module is the producing end of that file contract.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"CWB1"


class CwbFormatError(Exception):
    pass


def write_cwb(path, arrays: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        blob = arr.astype("<f4", copy=False).tobytes()
        entries.append({"name": name, "dtype": "f32",
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(entries).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_cwb(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CwbFormatError(f"{path}: bad magic")
    header_len = struct.unpack("<I", data[4:8])[0]
    if 8 + header_len > len(data):
        raise CwbFormatError(f"{path}: truncated header")
    entries = json.loads(data[8:8 + header_len].decode("utf-8"))
    base = 8 + header_len
    arrays = {}
    for entry in entries:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise CwbFormatError(f"{path}: truncated blob {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            data[start:end], dtype="<f4").reshape(entry["shape"]).copy()
    return arrays

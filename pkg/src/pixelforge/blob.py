"""Flat f32 array blobs with a JSON header.

Layout (little-endian): magic ``PXFB``, u32 header length, UTF-8 JSON header,
then each array's f32 values row-major in header order. The header holds
``{"arrays": [{"name": ..., "shape": [...]}, ...], "meta": {...}}``.
"""
from __future__ import annotations

import json
import struct

import numpy as np

BLOB_MAGIC = b"PXFB"


class BlobFormatError(ValueError):
    pass


def encode_blob(arrays: dict, **meta) -> bytes:
    header = {"arrays": [], "meta": meta}
    payload = []
    for name, arr in arrays.items():
        a = np.asarray(arr)
        header["arrays"].append({"name": name, "shape": list(a.shape)})
        payload.append(a.astype("<f4").tobytes())
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return BLOB_MAGIC + struct.pack("<I", len(head)) + head + b"".join(payload)


def decode_blob(data: bytes) -> tuple[dict, dict]:
    """Return ``(meta, arrays)``; arrays come back as float64."""
    if data[:4] != BLOB_MAGIC:
        raise BlobFormatError("not a PXFB blob")
    if len(data) < 8:
        raise BlobFormatError("truncated blob header")
    (n,) = struct.unpack_from("<I", data, 4)
    try:
        header = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BlobFormatError(f"bad blob header: {exc}") from exc
    pos = 8 + n
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 4 * count
        if end > len(data):
            raise BlobFormatError(f"truncated data for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(data[pos:end], dtype="<f4").astype(np.float64).reshape(shape)
        pos = end
    if pos != len(data):
        raise BlobFormatError("trailing bytes in blob")
    return header.get("meta", {}), arrays


def write_blob(path, arrays: dict, **meta):
    with open(path, "wb") as fh:
        fh.write(encode_blob(arrays, **meta))


def read_blob(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return decode_blob(fh.read())

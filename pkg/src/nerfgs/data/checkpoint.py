"""Binary checkpoints: magic, uint32 header length, JSON header, little-endian array blob.

Floating arrays are stored at the precision declared in the header (float32 by
default); integer arrays are stored as int64. Arrays follow header order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NGSCKPT\x00"
FORMAT_VERSION = 1
_PRECISIONS = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(Exception):
    code = "checkpoint_error"


class CorruptHeaderError(CheckpointError):
    code = "corrupt_header"


class TruncatedBlobError(CheckpointError):
    code = "truncated_blob"


class VersionMismatchError(CheckpointError):
    code = "version_mismatch"


class ShapeMismatchError(CheckpointError):
    code = "shape_mismatch"


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None,
                    precision: str = "float32") -> None:
    if precision not in _PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}")
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.floating):
            dt = _PRECISIONS[precision]
        elif np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
            dt = "<i8"
        else:
            raise TypeError(f"array {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"version": FORMAT_VERSION, "precision": precision, "entries": entries,
              "total_bytes": offset, "meta": meta or {}}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def read_header(data: bytes) -> tuple[dict, int]:
    if len(data) < len(MAGIC) + 4 or not data.startswith(MAGIC):
        raise CorruptHeaderError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if start + hlen > len(data):
        raise CorruptHeaderError("header length exceeds file size")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or not {"version", "entries", "total_bytes"} <= header.keys():
        raise CorruptHeaderError("header is missing required fields")
    return header, start + hlen


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, header)``; raises a :class:`CheckpointError` subclass on bad input."""
    data = Path(path).read_bytes()
    header, blob_start = read_header(data)
    if header["version"] != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {header['version']} != supported {FORMAT_VERSION}")
    blob = memoryview(data)[blob_start:]
    declared = 0
    for e in header["entries"]:
        expect = int(np.prod(e["shape"], dtype=np.int64)) * np.dtype(e["dtype"]).itemsize
        if expect != e["nbytes"]:
            raise ShapeMismatchError(f"{e['name']}: shape {e['shape']} needs {expect} bytes, header says {e['nbytes']}")
        declared += expect
    if declared != header["total_bytes"]:
        raise ShapeMismatchError(f"entries sum to {declared} bytes, header declares {header['total_bytes']}")
    if len(blob) < declared:
        raise TruncatedBlobError(f"truncated blob: {len(blob)} of {declared} bytes present")
    if len(blob) > declared:
        raise ShapeMismatchError(f"blob has {len(blob) - declared} bytes beyond the declared total")
    arrays = {}
    for e in header["entries"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return arrays, header

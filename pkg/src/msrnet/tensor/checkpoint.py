"""Binary parameter checkpoints.

Layout: an 8-byte little-endian unsigned header length, the UTF-8 JSON header,
then the raw little-endian float64 data of every array back to back. The
header lists each array's name, shape and byte offset (relative to the start
of the data block) plus free-form metadata.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "msrnet-checkpoint"
VERSION = 1


def encode_checkpoint(arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {"format": FORMAT, "version": VERSION, "params": entries,
              "nbytes": offset, "meta": dict(meta or {})}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(blobs)


def decode_checkpoint(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(raw) < 8:
        raise ValueError("checkpoint truncated: missing header length")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    if header.get("format") != FORMAT:
        raise ValueError(f"not a checkpoint file (format={header.get('format')!r})")
    data = raw[8 + hlen:]
    if len(data) != header["nbytes"]:
        raise ValueError(f"checkpoint truncated: expected {header['nbytes']} data bytes, got {len(data)}")
    arrays = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    return arrays, header.get("meta", {})


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(arrays, meta))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())

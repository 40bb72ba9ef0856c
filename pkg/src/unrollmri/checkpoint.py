"""Self-describing binary checkpoints for named arrays plus JSON metadata.

Layout (all little endian):

    8 bytes   magic  b"UMRCKPT\\0"
    4 bytes   uint32 header length in bytes
    N bytes   UTF-8 JSON header:
                {"version": 1,
                 "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
                 "meta": {...}}
    ...       raw tensor payload, offsets relative to payload start

Metadata must be JSON-serializable; arrays live in the payload, never in the
header. Loading restores float64/complex128 arrays exactly (bitwise).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UMRCKPT\0"
VERSION = 1

_DTYPES = {"float64": "<f8", "complex128": "<c16", "float32": "<f4",
           "int64": "<i8", "uint8": "|u1"}


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CheckpointFormatError(CheckpointError):
    """File is not a checkpoint or is corrupt/truncated."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dname = arr.dtype.name
        if dname not in _DTYPES:
            raise TypeError(f"unsupported dtype {dname} for array {name!r}")
        raw = arr.astype(_DTYPES[dname]).tobytes()
        entries.append({"name": name, "dtype": dname, "shape": list(arr.shape),
                        "offset": len(payload), "nbytes": len(raw)})
        payload += raw
    header = json.dumps({"version": VERSION, "tensors": entries,
                         "meta": meta or {}}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (arrays, meta). Raises CheckpointFormatError on a foreign or
    truncated file and CheckpointVersionError on an unknown version."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4])
    hstart = len(MAGIC) + 4
    if hstart + hlen > len(blob):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: bad header ({e})") from e
    if header.get("version") != VERSION:
        raise CheckpointVersionError(
            f"{path}: version {header.get('version')!r}, expected {VERSION}")
    data = blob[hstart + hlen:]
    arrays = {}
    for ent in header["tensors"]:
        end = ent["offset"] + ent["nbytes"]
        if end > len(data):
            raise CheckpointFormatError(f"{path}: truncated payload for {ent['name']!r}")
        arr = np.frombuffer(data[ent["offset"]:end], dtype=_DTYPES[ent["dtype"]])
        arrays[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return arrays, header.get("meta", {})

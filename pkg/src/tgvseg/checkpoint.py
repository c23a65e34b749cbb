"""Flat binary container of named float64 arrays.

Layout (all integers little-endian, documented for external tooling):

    bytes 0-3   magic  b"TGCK"
    u32         format version (currently 1)
    u32         length of the UTF-8 JSON metadata block
    ...         metadata bytes (JSON object, keys sorted)
    u32         number of arrays
    per array:
        u16     name length, then the UTF-8 name
        u8      ndim, then ndim * u32 dimensions
        ...     row-major float64 little-endian payload

Round trips are bit-exact: payloads are the raw IEEE-754 bytes.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

from .errors import CheckpointError

MAGIC = b"TGCK"
VERSION = 1


def save_arrays(path, arrays: Dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            payload = np.ascontiguousarray(arr, dtype="<f8")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", payload.ndim))
            for dim in payload.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(payload.tobytes())


def load_arrays(path) -> Tuple[Dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return _parse(raw)
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"corrupted checkpoint {path}: {exc}") from exc


def _parse(raw: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    pos = 4
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = json.loads(raw[pos : pos + meta_len].decode("utf-8")) if meta_len else {}
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if ndim else 8
        chunk = raw[pos : pos + n_bytes]
        if len(chunk) != n_bytes:
            raise CheckpointError(f"array {name!r} truncated")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        pos += n_bytes
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last array")
    return arrays, meta

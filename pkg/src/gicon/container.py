"""Binary container shared by datasets, retrieval pools and checkpoints.

Layout (all little-endian)::

    magic        8 bytes   e.g. b"GICON-DS"
    version      1 byte
    header_len   uint32
    header       header_len bytes of UTF-8 JSON
    payload      raw tensor bytes, concatenated in header order

The header carries a ``tensors`` table (name, dtype, shape) plus free-form
metadata. Tensor bytes are C-order with no padding.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

VERSION = 1
_PREFIX = struct.Struct("<8sBI")
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class FormatError(ValueError):
    pass


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


def _dtype_code(arr: np.ndarray) -> str:
    for code, dt in _DTYPES.items():
        if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
            return code
    raise TypeError(f"unsupported tensor dtype {arr.dtype}")


def dumps(magic: bytes, meta: Dict[str, Any], tensors: Dict[str, np.ndarray], version: int = VERSION) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    table = []
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        table.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    header = json.dumps({"meta": meta, "tensors": table}, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(magic, version, len(header)) + header + b"".join(blobs)


def loads(buf: bytes, magic: bytes, version: int = VERSION) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if len(buf) < _PREFIX.size:
        raise TruncatedError("file shorter than the fixed prefix")
    got_magic, got_version, header_len = _PREFIX.unpack_from(buf, 0)
    if got_magic != magic:
        raise BadMagicError(f"bad magic {got_magic!r}, expected {magic!r}")
    if got_version != version:
        raise UnsupportedVersionError(f"unsupported version {got_version}, expected {version}")
    start = _PREFIX.size
    if len(buf) < start + header_len:
        raise TruncatedError("header truncated")
    try:
        header = json.loads(buf[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    offset = start + header_len
    tensors: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if len(buf) < offset + nbytes:
            raise TruncatedError(f"payload truncated in tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after payload")
    return header["meta"], tensors


def write(path, magic: bytes, meta: Dict[str, Any], tensors: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(magic, meta, tensors))


def read(path, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), magic)

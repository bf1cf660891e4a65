"""Versioned binary container: a JSON header followed by named arrays.

Used for both model checkpoints and dataset caches. Writing is fully
deterministic (sorted JSON keys, insertion-ordered tensors, little-endian
payloads), so identical state produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import IngestError

MAGIC = b"HSTN"
VERSION = 1

_DTYPE_CODES = {"<f8": 0, "|b1": 1, "<i8": 2}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("|b1"), 2: np.dtype("<i8")}


def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            if arr.dtype == np.bool_:
                canonical = np.ascontiguousarray(arr)
            elif np.issubdtype(arr.dtype, np.integer):
                canonical = np.ascontiguousarray(arr, dtype="<i8")
            else:
                canonical = np.ascontiguousarray(arr, dtype="<f8")
            code = _DTYPE_CODES[canonical.dtype.str if canonical.dtype != np.bool_ else "|b1"]
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", code))
            fh.write(struct.pack("<B", canonical.ndim))
            for dim in canonical.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(canonical.tobytes(order="C"))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    view = memoryview(blob)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise IngestError(f"{path}: truncated container")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise IngestError(f"{path}: not a container file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise IngestError(f"{path}: unsupported container version {version}")
    (header_len,) = struct.unpack("<Q", take(8))
    header = json.loads(bytes(take(header_len)).decode("utf-8"))
    (n_arrays,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (code,) = struct.unpack("<B", take(1))
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise IngestError(f"{path}: unknown dtype code {code} for array {name!r}")
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        arrays[name] = data.copy()
    return header, arrays

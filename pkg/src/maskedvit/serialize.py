"""Deterministic binary container for arrays plus JSON metadata.

Zip-based formats embed timestamps, so the same payload written twice
yields different bytes. Checkpoints and preprocessed slides must round
trip bit-exactly, hence this fixed layout:

    bytes 0..7    magic b"MVBLOB1\\n"
    bytes 8..15   header length, unsigned 64-bit little-endian
    header        UTF-8 JSON: {"meta": {...}, "arrays": [{name, dtype, shape}, ...]}
    payload       each array's raw bytes, C order, in header order

Allowed dtypes are little-endian float64/int64 and uint8. The header is
serialized with sorted keys and compact separators, so identical inputs
produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MVBLOB1\n"

_DTYPES = {
    "<f8": np.dtype("<f8"),
    "<i8": np.dtype("<i8"),
    "|u1": np.dtype("|u1"),
}


class ContainerError(ValueError):
    """The file is not a well-formed container."""


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "<f8"
    if arr.dtype == np.int64:
        return "<i8"
    if arr.dtype == np.uint8:
        return "|u1"
    raise ContainerError(f"unsupported dtype {arr.dtype!r}; use float64, int64 or uint8")


def write_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write `arrays` (name -> ndarray) with `meta` to `path`.

    `meta` must be JSON-serializable. Array order in the file follows the
    sorted array names so the writer itself is order-insensitive.
    """
    names = sorted(arrays)
    entries = []
    blobs = []
    for name in names:
        arr = np.asarray(arrays[name])
        if not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray would promote 0-d to (1,)
            arr = np.ascontiguousarray(arr)
        tag = _dtype_tag(arr)
        # ascontiguousarray does not force byte order; do it explicitly
        arr = arr.astype(_DTYPES[tag], copy=False)
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    header = json.dumps(
        {"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container, returning (meta, arrays)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: corrupt header: {exc}") from exc
        if not isinstance(header, dict) or "meta" not in header or "arrays" not in header:
            raise ContainerError(f"{path}: header missing meta/arrays")
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            name, tag, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
            if tag not in _DTYPES:
                raise ContainerError(f"{path}: unknown dtype tag {tag!r}")
            dtype = _DTYPES[tag]
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ContainerError(f"{path}: truncated payload for {name!r}")
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise ContainerError(f"{path}: trailing bytes after payload")
    return header["meta"], arrays

"""Named-array container file format.

A container holds an ordered set of named n-dimensional arrays plus a JSON
metadata block. The byte layout is:

    bytes 0..8    little-endian uint64, byte length of the JSON header
    bytes 8..8+N  UTF-8 JSON header
    remainder     raw array data, little-endian, concatenated in header order

The header is ``{"meta": {...}, "arrays": [{"name", "shape", "dtype"}, ...]}``.
Array dtypes are restricted to a small portable set so that a round trip is
bit-exact on any platform.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

SUPPORTED_DTYPES = {
    "float64": "<f8",
    "float32": "<f4",
    "float16": "<f2",
    "int64": "<i8",
    "int32": "<i4",
    "int16": "<i2",
    "uint8": "|u1",
    "bool": "|b1",
}


class ContainerError(Exception):
    """Raised for malformed container files or metadata mismatches."""


def write_container(path, arrays, meta=None):
    """Write named arrays plus a JSON metadata dict to ``path``.

    ``arrays`` is a mapping name -> ndarray. The write is atomic: data goes to
    a temporary file in the same directory which is then renamed over ``path``.
    """
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype_name = arr.dtype.name
        if dtype_name not in SUPPORTED_DTYPES:
            raise ContainerError(f"unsupported array dtype {dtype_name!r} for {name!r}")
        le = arr.astype(SUPPORTED_DTYPES[dtype_name], copy=False)
        entries.append({"name": str(name), "shape": list(arr.shape), "dtype": dtype_name})
        blobs.append(np.ascontiguousarray(le).tobytes())

    header = json.dumps({"meta": meta or {}, "arrays": entries}).encode("utf-8")
    path = os.fspath(path)
    dirname = os.path.dirname(os.path.abspath(path))
    os.makedirs(dirname, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=dirname, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(len(header).to_bytes(8, "little"))
            f.write(header)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path):
    """Read a container; returns ``(arrays, meta)`` with native-endian arrays."""
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        raw_len = f.read(8)
        if len(raw_len) != 8:
            raise ContainerError(f"{path}: truncated header length field")
        header_len = int.from_bytes(raw_len, "little")
        raw_header = f.read(header_len)
        if len(raw_header) != header_len:
            raise ContainerError(f"{path}: truncated JSON header")
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: corrupt JSON header: {exc}") from exc
        if not isinstance(header, dict) or "arrays" not in header:
            raise ContainerError(f"{path}: header missing 'arrays' section")

        arrays = {}
        for entry in header["arrays"]:
            name, shape, dtype_name = entry["name"], tuple(entry["shape"]), entry["dtype"]
            if dtype_name not in SUPPORTED_DTYPES:
                raise ContainerError(f"{path}: unsupported dtype {dtype_name!r} for {name!r}")
            dt = np.dtype(SUPPORTED_DTYPES[dtype_name])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            blob = f.read(count * dt.itemsize)
            if len(blob) != count * dt.itemsize:
                raise ContainerError(f"{path}: truncated data for array {name!r}")
            arrays[name] = np.frombuffer(blob, dtype=dt).reshape(shape).astype(dtype_name)
    return arrays, header.get("meta", {})


def peek_meta(path):
    """Read only the metadata dict of a container (no array payload)."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        raw_len = f.read(8)
        if len(raw_len) != 8:
            raise ContainerError(f"{path}: truncated header length field")
        header_len = int.from_bytes(raw_len, "little")
        raw_header = f.read(header_len)
        if len(raw_header) != header_len:
            raise ContainerError(f"{path}: truncated JSON header")
        try:
            header = json.loads(raw_header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: corrupt JSON header: {exc}") from exc
    return header.get("meta", {})

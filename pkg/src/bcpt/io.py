"""Framed binary container shared by fold files and checkpoints.

Layout (all integers little-endian)::

    magic         8 bytes   b"BCPTFOLD" or b"BCPTCKPT"
    version       uint32
    header_len    uint32
    header        header_len bytes of UTF-8 JSON, keys sorted
    payload       concatenated array blocks, each C-order, little-endian

The header carries a ``blocks`` table of ``{name, dtype, shape, offset}``
entries; offsets are relative to the start of the payload.  Reals are
``<f8`` and label planes ``<i4``.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import StructuralError

FORMAT_VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i4": np.dtype("<i4")}


def _dump_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, magic: bytes, header: dict, blocks) -> None:
    """Write ``blocks`` (iterable of ``(name, kind, array)``, kind in f8/i4)."""
    table = []
    payload = []
    offset = 0
    for name, kind, array in blocks:
        arr = np.ascontiguousarray(array, dtype=_DTYPES[kind])
        raw = arr.tobytes(order="C")
        table.append({"name": name, "dtype": kind, "shape": list(arr.shape), "offset": offset})
        payload.append(raw)
        offset += len(raw)
    header = dict(header, blocks=table, format_version=FORMAT_VERSION)
    head = _dump_header(header)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        for raw in payload:
            fh.write(raw)


def read_container(path, magic: bytes):
    """Return ``(header, {name: array})``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != magic:
        raise StructuralError(f"{path}: not a {magic.decode()} container")
    version, head_len = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise StructuralError(f"{path}: unsupported container version {version}")
    header = json.loads(data[16 : 16 + head_len].decode("utf-8"))
    base = 16 + head_len
    arrays = {}
    for entry in header["blocks"]:
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=start).reshape(shape)
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    return header, arrays

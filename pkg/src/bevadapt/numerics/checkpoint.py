"""Binary checkpoint files: versioned header plus named tensor triples.

Layout (all integers little-endian):

    magic   4 bytes  b"BVCK"
    version u32
    count   u32
    entry*  name_len u32, name utf-8, ndim u32, dims u32*, data f64-LE*

Entries are written in sorted name order so identical parameter sets
always serialize to identical bytes; round-trips are bit-exact.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

from .tensor import ParameterSet, TensorRecord

MAGIC = b"BVCK"
VERSION = 1


class CheckpointError(IOError):
    """Raised for malformed or truncated checkpoint data."""


def write_entry(stream: BinaryIO, name: str, record: TensorRecord) -> None:
    encoded = name.encode("utf-8")
    stream.write(struct.pack("<I", len(encoded)))
    stream.write(encoded)
    stream.write(struct.pack("<I", len(record.shape)))
    for dim in record.shape:
        stream.write(struct.pack("<I", dim))
    stream.write(record.array.astype("<f8").tobytes(order="C"))


def read_entry(stream: BinaryIO) -> tuple[str, TensorRecord]:
    (name_len,) = struct.unpack("<I", _read_exact(stream, 4))
    name = _read_exact(stream, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(stream, 4))
    dims = struct.unpack(f"<{ndim}I", _read_exact(stream, 4 * ndim)) if ndim else ()
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    raw = _read_exact(stream, 8 * count)
    data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    return name, TensorRecord(data)


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def dump_entries(entries: dict[str, TensorRecord], version: int = VERSION) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", version))
    out.write(struct.pack("<I", len(entries)))
    for name in sorted(entries):
        write_entry(out, name, entries[name])
    return out.getvalue()


def parse_entries(stream: BinaryIO) -> tuple[dict[str, TensorRecord], int]:
    if _read_exact(stream, 4) != MAGIC:
        raise CheckpointError("not a checkpoint stream (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(stream, 4))
    (count,) = struct.unpack("<I", _read_exact(stream, 4))
    entries: dict[str, TensorRecord] = {}
    for _ in range(count):
        name, record = read_entry(stream)
        if name in entries:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        entries[name] = record
    return entries, version


def save_checkpoint(params: ParameterSet, path: str | os.PathLike) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = os.fspath(path)
    blob = dump_entries(params.entries, params.version)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> ParameterSet:
    with open(path, "rb") as fh:
        entries, version = parse_entries(fh)
    return ParameterSet(entries, version)

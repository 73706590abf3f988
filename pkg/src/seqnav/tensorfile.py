"""Portable named-tensor container and delimited record streams.

Tensor container layout (all integers little-endian)::

    b"SQNV" | u16 version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 dtype code | u8 rank
               | rank x u64 dims | row-major payload

Record streams are CSV with a typed header (``name:f``, ``name:i`` or
``name:s``); floats are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import csv
import io
import os
import struct
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import BadMagic, TruncatedPayload, UnsupportedVersion

MAGIC = b"SQNV"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}

PathLike = Union[str, os.PathLike]


def dumps(tensors: Mapping[str, np.ndarray], version: int = VERSION) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HI", version, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = CODES.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedPayload(f"need {n} bytes for {what} at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {bytes(data[:4])!r}")
    r = _Reader(data)
    r.take(4, "magic")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} (supported: {VERSION})")
    (count,) = r.unpack("<I", "entry count")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H", "name length")
        name = r.take(n, "name").decode("utf-8")
        code, rank = r.unpack("<BB", "dtype and rank")
        if code not in DTYPES:
            raise ValueError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q", "dims")
        dt = DTYPES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        payload = r.take(size, f"payload of {name}")
        if name in out:
            raise ValueError(f"duplicate entry {name!r}")
        out[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return out


def write_tensors(path: PathLike, tensors: Mapping[str, np.ndarray], version: int = VERSION) -> None:
    with open(path, "wb") as f:
        f.write(dumps(tensors, version))


def read_tensors(path: PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())


# -- record streams -------------------------------------------------------------

_PARSE = {"f": float, "i": int, "s": str}


def _fmt(value, kind: str) -> str:
    if kind == "f":
        return repr(float(value))
    if kind == "i":
        return str(int(value))
    text = str(value)
    if "\0" in text:
        raise ValueError("record strings cannot contain NUL")
    return text


def write_records(path: PathLike, fields: Sequence[tuple[str, str]], rows: Iterable[Mapping]) -> None:
    """Write rows (mappings keyed by field name) under a typed header."""
    for name, kind in fields:
        if kind not in _PARSE:
            raise ValueError(f"field {name}: unknown type {kind!r}")
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        # csv only quotes the line terminator itself, so rows holding a bare CR are fully quoted
        quoted = csv.writer(f, lineterminator="\n", quoting=csv.QUOTE_ALL)
        w.writerow([f"{n}:{k}" for n, k in fields])
        for row in rows:
            cells = [_fmt(row[n], k) for n, k in fields]
            (quoted if any("\r" in c for c in cells) else w).writerow(cells)


def read_records(path: PathLike) -> tuple[list[tuple[str, str]], list[dict]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise TruncatedPayload(f"{path}: missing header") from None
        fields = []
        for col in header:
            name, _, kind = col.rpartition(":")
            if kind not in _PARSE or not name:
                raise ValueError(f"{path}: bad header column {col!r}")
            fields.append((name, kind))
        rows = []
        for line in reader:
            if len(line) != len(fields):
                raise TruncatedPayload(f"{path}: row {len(rows) + 1} has {len(line)} of {len(fields)} columns")
            rows.append({n: _PARSE[k](v) for (n, k), v in zip(fields, line)})
    return fields, rows

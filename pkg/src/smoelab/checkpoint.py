"""Binary checkpoint format.

Layout: magic bytes "SMOELAB1", a u64 little-endian length followed by a
UTF-8 config text block, then records until end of file. Each record is:

    u64 name length, name bytes,
    u64 rank, rank x u64 dims,
    1 flags byte (bit0: trainable),
    prod(dims) float64 little-endian values (row major).

The config text block carries the run configuration snapshot plus a
[checkpoint] section (format version, step counter, RNG derivation state).
Files are written atomically (temp file then rename).
"""

from __future__ import annotations

import os
import struct
import tempfile
from typing import NamedTuple

import numpy as np

from .errors import ContractError

MAGIC = b"SMOELAB1"
FORMAT_VERSION = 1


class Record(NamedTuple):
    name: str
    array: np.ndarray
    trainable: bool


def write_checkpoint(path, config_text: str, records: list[Record]) -> None:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            blob = config_text.encode("utf-8")
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for rec in records:
                name = rec.name.encode("utf-8")
                arr = np.asarray(rec.array, dtype=np.float64)
                if arr.ndim and not arr.flags.c_contiguous:
                    arr = np.ascontiguousarray(arr)
                f.write(struct.pack("<Q", len(name)))
                f.write(name)
                f.write(struct.pack("<Q", arr.ndim))
                for d in arr.shape:
                    f.write(struct.pack("<Q", d))
                f.write(bytes([1 if rec.trainable else 0]))
                f.write(arr.astype("<f8", copy=False).tobytes(order="C"))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> tuple[str, list[Record]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[: len(MAGIC)] != MAGIC:
        raise ContractError(f"{path} is not a checkpoint (bad magic)")
    off = len(MAGIC)

    def u64():
        nonlocal off
        (v,) = struct.unpack_from("<Q", data, off)
        off += 8
        return v

    cfg_len = u64()
    config_text = data[off : off + cfg_len].decode("utf-8")
    off += cfg_len
    records = []
    while off < len(data):
        name_len = u64()
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        rank = u64()
        dims = tuple(u64() for _ in range(rank))
        trainable = bool(data[off] & 1)
        off += 1
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(dims)
        off += 8 * count
        records.append(Record(name, arr.copy(), trainable))
    return config_text, records

"""NMWT weight container: a flat list of named little-endian FP32 tensors.

Layout::

    b"NMWT"  u32 version
    repeated until EOF:
        u32 name_len, name (utf-8), u32 rank, rank x u64 dims, FP32 payload
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ArgumentError

MAGIC = b"NMWT"
VERSION = 1


def dumps(tensors: dict) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def loads(data: bytes) -> dict:
    if data[:4] != MAGIC:
        raise ArgumentError("not an NMWT weight file", magic=data[:4].hex())
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ArgumentError(f"unsupported NMWT version {version}")
    pos, tensors = 8, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{rank}Q", data, pos + 4)
            pos += 4 + 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 4 * count > len(data):
                raise ArgumentError(f"truncated payload for tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
            tensors[name] = arr.astype(np.float32)
            pos += 4 * count
    except struct.error as e:
        raise ArgumentError(f"truncated NMWT file: {e}") from None
    return tensors


def save(tensors: dict, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path) -> dict:
    with open(path, "rb") as fh:
        return loads(fh.read())

"""Named-parameter checkpoint files (``.kprm``).

Little-endian: magic "KPRM", version u32, parameter count u32; per parameter
name length u16, UTF-8 name, rank u8, dims u32 x rank, f64 payload; CRC-32 of
everything before it as a u32 trailer.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import ChecksumError, DataError, DatasetFormatError, DatasetTruncatedError

MAGIC = b"KPRM"
VERSION = 1


def encode_parameters(params: dict) -> bytes:
    parts = [struct.pack("<4sII", MAGIC, VERSION, len(params))]
    for name, arr in params.items():
        arr = np.array(arr, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_parameters(buf: bytes) -> dict:
    if len(buf) < 16:
        raise DatasetTruncatedError("parameter file shorter than header and trailer")
    magic, version, count = struct.unpack_from("<4sII", buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported parameter file version {version}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC-32 mismatch in parameter file", block="parameters")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            nbytes = 8 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(body):
                raise DatasetTruncatedError(f"parameter {name!r} payload runs past end of file")
            out[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise DatasetTruncatedError(f"parameter file truncated: {exc}") from exc
    if pos != len(body):
        raise DatasetFormatError(f"{len(body) - pos} unexpected bytes before trailer")
    return out


def save_parameters(path, params: dict) -> None:
    Path(path).write_bytes(encode_parameters(params))


def load_parameters(path) -> dict:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read parameter file {path}: {exc}") from exc
    return decode_parameters(buf)

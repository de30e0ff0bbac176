"""Binary trajectory dataset files (``.kbub``).

Layout, little-endian throughout::

    header   magic "KBUB", version u32, nx u32, nz u32, n_variables u32 (=4),
             n_records u32, payload dtype u8 (0=f32, 1=f64), 7 reserved bytes
    stats    4 x (mean f64, std f64)
    record   spec count u16,
             per spec: kind u8 (0=hot, 1=cold), temp, radius, stability, cx, cz (f64)
             truncated u8, n_saved u32,
             n_saved x 4 x (nz*nx) field values, row-major, order rho, rho*u1, rho*u3, rho*theta
             CRC-32 (u32) of the record bytes above
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumError, DataError, DatasetFormatError, DatasetTruncatedError
from .scenario import BubbleSpec, NormStats, TrajectoryRecord

MAGIC = b"KBUB"
VERSION = 1
N_VARIABLES = 4

_HEADER = struct.Struct("<4sIIIIIB7x")
_STATS = struct.Struct("<8d")
_SPEC = struct.Struct("<B5d")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_REC_TAIL = struct.Struct("<BI")

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_KINDS = {"hot": 0, "cold": 1}
_KIND_NAMES = {v: k for k, v in _KINDS.items()}


def _dtype_code(dtype) -> int:
    dtype = np.dtype(dtype)
    for code, dt in _DTYPES.items():
        if dt == dtype.newbyteorder("<"):
            return code
    raise DataError(f"unsupported payload dtype {dtype}")


def encode_dataset(records, stats: NormStats, dtype=np.float32, shape=None) -> bytes:
    code = _dtype_code(dtype)
    if records:
        nz, nx = records[0].states.shape[-2:]
    elif shape is not None:
        nz, nx = shape
    else:
        nz = nx = 0
    parts = [_HEADER.pack(MAGIC, VERSION, nx, nz, N_VARIABLES, len(records), code)]
    parts.append(_STATS.pack(*[v for pair in zip(stats.mean, stats.std) for v in pair]))
    for i, rec in enumerate(records):
        if rec.states.shape[1:] != (N_VARIABLES, nz, nx):
            raise DataError(
                f"record {i} has state shape {rec.states.shape[1:]}, expected {(N_VARIABLES, nz, nx)}"
            )
        body = [_U16.pack(len(rec.specs))]
        for s in rec.specs:
            body.append(_SPEC.pack(_KINDS[s.kind], s.temp_k, s.radius_m, s.stability_m, s.cx_m, s.cz_m))
        body.append(_REC_TAIL.pack(int(bool(rec.truncated)), rec.n_saved))
        body.append(np.ascontiguousarray(rec.states, dtype=_DTYPES[code]).tobytes())
        blob = b"".join(body)
        parts.append(blob)
        parts.append(_U32.pack(zlib.crc32(blob)))
    return b"".join(parts)


def write_dataset(records, stats: NormStats, path, dtype=np.float32, shape=None) -> None:
    """Serialize records and normalization statistics to ``path``.

    ``shape`` gives ``(nz, nx)`` for the header when ``records`` is empty.
    """
    Path(path).write_bytes(encode_dataset(list(records), stats, dtype, shape))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetTruncatedError(
                f"file ends inside {what} (need {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos})"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))


def decode_dataset(buf: bytes, output_interval_s: float = 5.0):
    rd = _Reader(buf)
    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    magic, version, nx, nz, nvar, nrec, code = rd.unpack(_HEADER, "header")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} (expected {VERSION})")
    if nvar != N_VARIABLES:
        raise DatasetFormatError(f"expected {N_VARIABLES} variables, header says {nvar}")
    if code not in _DTYPES:
        raise DatasetFormatError(f"unknown payload dtype code {code}")
    dt = _DTYPES[code]
    flat = rd.unpack(_STATS, "stats block")
    stats = NormStats(tuple(flat[0::2]), tuple(flat[1::2]))
    records = []
    for i in range(nrec):
        start = rd.pos
        (n_specs,) = rd.unpack(_U16, f"record {i}")
        specs = []
        for _ in range(n_specs):
            kind, temp, radius, stab, cx, cz = rd.unpack(_SPEC, f"record {i}")
            if kind not in _KIND_NAMES:
                raise DatasetFormatError(f"record {i}: unknown bubble kind code {kind}")
            specs.append(BubbleSpec(_KIND_NAMES[kind], temp, radius, stab, cx, cz))
        truncated, n_saved = rd.unpack(_REC_TAIL, f"record {i}")
        payload = rd.take(n_saved * N_VARIABLES * nz * nx * dt.itemsize, f"record {i} payload")
        blob = buf[start:rd.pos]
        (crc,) = rd.unpack(_U32, f"record {i} checksum")
        if zlib.crc32(blob) != crc:
            raise ChecksumError(f"CRC-32 mismatch in record {i}", block=f"record {i}")
        states = np.frombuffer(payload, dtype=dt).reshape(n_saved, N_VARIABLES, nz, nx).copy()
        records.append(TrajectoryRecord(specs, states, bool(truncated), output_interval_s))
    if rd.pos != len(buf):
        raise DatasetFormatError(f"{len(buf) - rd.pos} trailing bytes after last record")
    return records, stats


def read_dataset(path, output_interval_s: float = 5.0):
    """Load ``(records, stats)`` written by :func:`write_dataset`."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    return decode_dataset(buf, output_interval_s)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise DatasetTruncatedError("file shorter than the header")
    magic, version, nx, nz, nvar, nrec, code = _HEADER.unpack(head)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    return {"version": version, "nx": nx, "nz": nz, "n_variables": nvar,
            "n_records": nrec, "dtype": str(_DTYPES.get(code, code))}

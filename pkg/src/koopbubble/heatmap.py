"""Grayscale PGM heatmaps with a CSV of the raw values alongside."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def to_gray(field, vrange=None) -> np.ndarray:
    """Map ``field`` linearly onto 0..255.

    ``vrange`` fixes the ``(lo, hi)`` mapped to 0 and 255; otherwise the
    field's own min/max are used.  Exact halves round down (127.5 -> 127),
    values outside the range saturate, and a zero-width range maps to 0.
    """
    a = np.asarray(field, dtype=np.float64)
    if a.ndim != 2:
        raise DataError(f"heatmap needs a 2D field, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataError("heatmap field contains non-finite values")
    lo, hi = (float(a.min()), float(a.max())) if vrange is None else map(float, vrange)
    if hi < lo:
        raise DataError(f"invalid range ({lo}, {hi})")
    if hi == lo:
        return np.zeros(a.shape, dtype=np.uint8)
    scaled = (a - lo) / (hi - lo) * 255.0
    return np.clip(np.ceil(scaled - 0.5), 0, 255).astype(np.uint8)


def export_heatmap(field, path, vrange=None) -> tuple[Path, Path]:
    """Write ``path`` as binary PGM (P5) plus ``path.csv`` with the raw values.

    Row 0 of ``field`` is the bottom of the domain, so the image is flipped
    vertically; the CSV keeps array order.
    """
    path = Path(path)
    gray = to_gray(field, vrange)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(gray[::-1]).tobytes())
    csv_path = path.with_suffix(".csv")
    np.savetxt(csv_path, np.asarray(field, dtype=np.float64), fmt="%.9g", delimiter=",")
    return path, csv_path


def read_pgm(path) -> np.ndarray:
    """Inverse of the PGM part of :func:`export_heatmap` (returns array order)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DataError(f"{path} is not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    img = np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
    return img[::-1].copy()

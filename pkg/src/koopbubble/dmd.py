"""Exact dynamic mode decomposition.

Fits the best linear map between consecutive snapshots through a truncated
SVD of the first snapshot matrix, then projects it to an ``r x r`` operator
whose eigenpairs give the DMD eigenvalues and (exact) modes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeError
from .scenario import THETA, NormStats, TrajectoryRecord, normalize, transform_fields

DEFAULT_RTOL = 1e-10


@dataclass(frozen=True)
class SnapshotMatrix:
    X: np.ndarray
    Xp: np.ndarray

    def __post_init__(self):
        if self.X.shape != self.Xp.shape or self.X.ndim != 2:
            raise ShapeError(f"snapshot matrices differ: {self.X.shape} vs {self.Xp.shape}")


@dataclass
class DMDResult:
    rank: int
    singular_values: np.ndarray
    atilde: np.ndarray
    eigenvalues: np.ndarray
    modes: np.ndarray
    amplitudes: np.ndarray

    def to_json(self) -> dict:
        return {
            "rank": self.rank,
            "singular_values": [float(s) for s in self.singular_values],
            "eigenvalues": [[float(v.real), float(v.imag)] for v in self.eigenvalues],
            "amplitudes": [[float(v.real), float(v.imag)] for v in self.amplitudes],
        }


def snapshots_from_sequence(seq) -> SnapshotMatrix:
    """Columns are flattened states; ``X`` holds 0..n-2 and ``Xp`` holds 1..n-1."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.shape[0] < 2:
        raise DataError(f"need at least 2 snapshots, got {seq.shape[0]}")
    cols = seq.reshape(seq.shape[0], -1).T
    return SnapshotMatrix(cols[:, :-1].copy(), cols[:, 1:].copy())


def build_snapshots(trajectory: TrajectoryRecord, variable: int = THETA, stats: NormStats | None = None):
    """Snapshot pair from one transformed, normalized variable of a trajectory."""
    if trajectory.n_saved < 2:
        raise DataError(f"trajectory has {trajectory.n_saved} states; need at least 2")
    fields = transform_fields(trajectory.states.astype(np.float64))[:, variable]
    if stats is not None:
        fields = normalize(fields, stats, variable)
    return snapshots_from_sequence(fields)


def fit_dmd(snapshots: SnapshotMatrix, rank: int | None = None, rtol: float = DEFAULT_RTOL) -> DMDResult:
    X, Xp = snapshots.X, snapshots.Xp
    U, s, Vh = np.linalg.svd(X, full_matrices=False)
    if s.size == 0 or s[0] == 0.0 or not np.isfinite(s[0]):
        raise DataError("degenerate snapshot matrix (zero or non-finite)")
    if rank is None:
        r = int(np.sum(s > rtol * s[0]))
    else:
        if not 1 <= rank <= min(X.shape):
            raise ShapeError(f"rank {rank} outside [1, {min(X.shape)}]")
        r = int(rank)
    Ur, sr, Vr = U[:, :r], s[:r], Vh[:r].conj().T
    XpV_Sinv = Xp @ Vr / sr
    atilde = Ur.conj().T @ XpV_Sinv
    lam, W = np.linalg.eig(atilde)
    order = np.lexsort((np.angle(lam), -np.round(np.abs(lam), 10)))  # conjugates tie on modulus
    lam, W = lam[order], W[:, order]
    modes = XpV_Sinv @ W
    b = np.linalg.lstsq(modes, X[:, 0], rcond=None)[0]
    return DMDResult(r, s, atilde, lam, modes, b)


def dmd_predict(result: DMDResult, x0, steps: int):
    """``Phi diag(lambda)^k b`` for k = 0..steps with ``b`` fitted to ``x0``.

    Returns ``(states, max_imag)`` where ``states`` is real with shape
    ``(steps + 1, n)`` and ``max_imag`` is the largest discarded imaginary part.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.shape[0] != result.modes.shape[0]:
        raise ShapeError(f"x0 has length {x0.shape[0]}, modes have {result.modes.shape[0]} rows")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    b = np.linalg.lstsq(result.modes, x0.astype(complex), rcond=None)[0]
    powers = result.eigenvalues[None, :] ** np.arange(steps + 1)[:, None]
    pred = (powers * b[None, :]) @ result.modes.T
    return pred.real.copy(), float(np.max(np.abs(pred.imag))) if pred.size else 0.0


def one_step_residual(result: DMDResult, snapshots: SnapshotMatrix) -> float:
    """Frobenius norm of ``Xp - Phi Lambda Phi^+ X``."""
    phi = result.modes
    approx = phi @ (result.eigenvalues[:, None] * (np.linalg.pinv(phi) @ snapshots.X))
    return float(np.linalg.norm(snapshots.Xp - approx))


def operator_residual(snapshots: SnapshotMatrix, rank: int) -> float:
    """Frobenius norm of ``Xp - A_r X`` for the rank-``r`` DMD operator ``A_r = Xp V_r S_r^-1 U_r^T``.

    Equals ``||Xp (I - V_r V_r^T)||``, so it never grows with ``rank``.
    """
    _, _, Vh = np.linalg.svd(snapshots.X, full_matrices=False)
    Vr = Vh[:rank].conj().T
    return float(np.linalg.norm(snapshots.Xp - snapshots.Xp @ Vr @ Vr.conj().T))


def write_modes(path, result: DMDResult, field_shape) -> None:
    """Mode fields as little-endian f64, real parts then imaginary parts, row-major."""
    nz, nx = field_shape
    m = result.modes.T.reshape(result.rank, nz, nx)
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(m.real, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(m.imag, dtype="<f8").tobytes())


def write_spectrum(path, result: DMDResult, extra: dict | None = None) -> None:
    doc = result.to_json()
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")

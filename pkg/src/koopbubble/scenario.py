"""Randomized rising/sinking bubble scenarios and the data pipeline around them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import euler
from .errors import ConfigError, DataError, DomainError, GenerationError, StabilityError
from .euler import Grid2D, PhysConstants, State2D

log = logging.getLogger(__name__)

VARIABLES = ("rho", "u1", "u3", "theta")
THETA = 3
STD_FLOOR = 1e-8
TRUNCATION_MARGIN = 10


@dataclass(frozen=True)
class BubbleDomain:
    """Sampling ranges for one bubble kind; intervals are closed, in K and m."""

    counts: tuple[int, ...]
    temp_k: tuple[float, float]
    radius_m: tuple[float, float]
    stability_m: float
    cx_m: tuple[float, float]
    cz_m: tuple[float, float]

    def contains(self, spec: "BubbleSpec") -> bool:
        def inside(v, lo_hi):
            return lo_hi[0] <= v <= lo_hi[1]

        return (
            inside(spec.temp_k, self.temp_k)
            and inside(spec.radius_m, self.radius_m)
            and spec.stability_m == self.stability_m
            and inside(spec.cx_m, self.cx_m)
            and inside(spec.cz_m, self.cz_m)
        )

    def to_dict(self) -> dict:
        return {
            "counts": list(self.counts),
            "temp_k": list(self.temp_k),
            "radius_m": list(self.radius_m),
            "stability_m": self.stability_m,
            "cx_m": list(self.cx_m),
            "cz_m": list(self.cz_m),
        }


HOT_DOMAIN = BubbleDomain(
    counts=(1, 2),
    temp_k=(303.3, 303.6),
    radius_m=(10.0, 80.0),
    stability_m=50.0,
    cx_m=(300.0, 700.0),
    cz_m=(50.0, 300.0),
)
COLD_DOMAIN = BubbleDomain(
    counts=(0, 1, 2),
    temp_k=(302.8, 302.9),
    radius_m=(10.0, 80.0),
    stability_m=50.0,
    cx_m=(200.0, 800.0),
    cz_m=(100.0, 750.0),
)


@dataclass(frozen=True)
class BubbleSpec:
    kind: str  # "hot" or "cold"
    temp_k: float
    radius_m: float
    stability_m: float
    cx_m: float
    cz_m: float

    def __post_init__(self):
        if self.kind not in ("hot", "cold"):
            raise ConfigError(f"bubble kind must be 'hot' or 'cold', got {self.kind!r}")
        if not (self.radius_m >= 0 and self.stability_m > 0):
            raise ConfigError("bubble radius must be >= 0 and stability > 0")


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    n_steps: int = 215
    output_interval_s: float = 5.0
    grid: Grid2D = field(default_factory=lambda: Grid2D(100, 100))
    consts: PhysConstants = field(default_factory=PhysConstants)
    cfl: float = 0.4
    hot: BubbleDomain = HOT_DOMAIN
    cold: BubbleDomain = COLD_DOMAIN

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if not self.output_interval_s > 0:
            raise ConfigError("output_interval_s must be positive")


@dataclass
class TrajectoryRecord:
    """Bubble specs plus the saved conserved states, shape (n_saved, 4, nz, nx)."""

    specs: list[BubbleSpec]
    states: np.ndarray
    truncated: bool = False
    output_interval_s: float = 5.0

    @property
    def n_saved(self) -> int:
        return int(self.states.shape[0])

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_saved) * self.output_interval_s

    def state(self, k: int) -> State2D:
        return State2D.from_array(self.states[k], k * self.output_interval_s)


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float, float]
    std: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.mean) != 4 or len(self.std) != 4:
            raise ConfigError("NormStats needs four (mean, std) pairs")
        if min(self.std) < STD_FLOOR:
            raise ConfigError(f"std below floor {STD_FLOOR}: {self.std}")

    @classmethod
    def identity(cls) -> "NormStats":
        return cls((0.0,) * 4, (1.0,) * 4)

    def to_dict(self) -> dict:
        return {"variables": list(VARIABLES), "mean": list(self.mean), "std": list(self.std)}


def _rng_for(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def _sample_kind(rng: np.random.Generator, kind: str, dom: BubbleDomain) -> list[BubbleSpec]:
    n = int(rng.choice(dom.counts))
    out = []
    for _ in range(n):
        out.append(BubbleSpec(
            kind=kind,
            temp_k=float(rng.uniform(*dom.temp_k)),
            radius_m=float(rng.uniform(*dom.radius_m)),
            stability_m=float(dom.stability_m),
            cx_m=float(rng.uniform(*dom.cx_m)),
            cz_m=float(rng.uniform(*dom.cz_m)),
        ))
    return out


def sample_scenario(rng: np.random.Generator, config: ScenarioConfig) -> list[BubbleSpec]:
    """Draw bubble counts and parameters uniformly from the configured domains."""
    return _sample_kind(rng, "hot", config.hot) + _sample_kind(rng, "cold", config.cold)


def theta_perturbation(specs: Sequence[BubbleSpec], grid: Grid2D, consts: PhysConstants):
    """Summed potential-temperature anomaly: plateau of radius r with a Gaussian skirt."""
    x = grid.x_centers()[None, :]
    z = grid.z_centers()[:, None]
    total = np.zeros(grid.shape)
    for s in specs:
        amp = s.temp_k - consts.theta0
        d = np.hypot(x - s.cx_m, z - s.cz_m)
        skirt = amp * np.exp(-(((d - s.radius_m) / s.stability_m) ** 2))
        total += np.where(d <= s.radius_m, amp, skirt)
    return total


def apply_perturbation(
    background: State2D,
    specs: Sequence[BubbleSpec],
    grid: Grid2D,
    consts: PhysConstants,
) -> State2D:
    """Add the bubbles' theta anomaly at fixed pressure.

    Pressure depends on rho*theta only, so holding it fixed keeps rho*theta
    and rescales rho by theta0/theta.
    """
    if not specs:
        return background.copy()
    theta_bg = background.rho_theta / background.rho
    theta = theta_bg + theta_perturbation(specs, grid, consts)
    if np.any(theta <= 0):
        raise DomainError("perturbed potential temperature is non-positive")
    rho = background.rho * (theta_bg / theta)
    return State2D(
        rho,
        np.zeros(grid.shape),
        np.zeros(grid.shape),
        background.rho_theta.copy(),
        background.time,
    )


def initial_state(specs, grid, consts) -> State2D:
    return apply_perturbation(euler.hydrostatic_background(grid, consts), specs, grid, consts)


def generate_trajectory(
    config: ScenarioConfig,
    index: int = 0,
    specs: Sequence[BubbleSpec] | None = None,
) -> TrajectoryRecord:
    """Simulate one scenario and save the state after every output interval.

    If the solver fails while producing saved state ``k``, only the first
    ``k - 10`` states are kept and the record is flagged as truncated.
    """
    if specs is None:
        specs = sample_scenario(_rng_for(config.seed, index), config)
    grid, consts = config.grid, config.consts
    state = initial_state(specs, grid, consts)
    saved = [state.to_array()]
    truncated = False
    for k in range(1, config.n_steps + 1):
        try:
            state = euler.advance_output_interval(
                state, config.output_interval_s, grid, consts, cfl=config.cfl
            )
        except StabilityError as exc:
            keep = k - TRUNCATION_MARGIN
            log.warning("scenario %d unstable at saved index %d (%s); keeping %d", index, k, exc, keep)
            if keep < 2:
                raise GenerationError(
                    f"scenario {index} failed at saved index {k}; fewer than 2 states remain"
                ) from exc
            saved = saved[:keep]
            truncated = True
            break
        saved.append(state.to_array())
    return TrajectoryRecord(list(specs), np.stack(saved), truncated, config.output_interval_s)


def transform_fields(q: np.ndarray) -> np.ndarray:
    """(rho, rho*u1, rho*u3, rho*theta) -> (rho, u1, u3, theta) along axis -3."""
    q = np.asarray(q)
    rho = q[..., 0, :, :]
    if np.any(rho <= 0):
        raise DomainError("density must be positive to divide it out")
    out = np.empty_like(q)
    out[..., 0, :, :] = rho
    out[..., 1:, :, :] = q[..., 1:, :, :] / rho[..., None, :, :]
    return out


def untransform_fields(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    out = np.empty_like(v)
    rho = v[..., 0, :, :]
    out[..., 0, :, :] = rho
    out[..., 1:, :, :] = v[..., 1:, :, :] * rho[..., None, :, :]
    return out


def transform_variables(state: State2D):
    """Divide density out of the momentum and rho*theta fields.

    Returns ``(rho, u1, u3, theta)``.
    """
    return tuple(transform_fields(state.to_array()))


def compute_norm_stats(records: Sequence[TrajectoryRecord]) -> NormStats:
    """Global per-variable mean and population std of the transformed fields."""
    if not records:
        raise DataError("cannot compute normalization statistics from zero records")
    count = 0
    sums = np.zeros(4)
    for r in records:
        v = transform_fields(r.states.astype(np.float64))
        sums += v.sum(axis=(0, 2, 3))
        count += v.shape[0] * v.shape[2] * v.shape[3]
    mean = sums / count
    sq = np.zeros(4)
    for r in records:
        v = transform_fields(r.states.astype(np.float64))
        sq += ((v - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3))
    std = np.maximum(np.sqrt(sq / count), STD_FLOOR)
    return NormStats(tuple(float(m) for m in mean), tuple(float(s) for s in std))


def _stat_arrays(stats: NormStats, variable, ndim: int):
    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    if variable is not None:
        return mean[variable], std[variable]
    shape = (4,) + (1,) * 2
    if ndim < 3:
        raise ConfigError("without a variable index the field needs a leading variable axis")
    return mean.reshape(shape), std.reshape(shape)


def normalize(x, stats: NormStats, variable: int | None = None):
    """``(x - mean) / std``; without ``variable`` the -3 axis indexes all four."""
    x = np.asarray(x, dtype=np.float64)
    m, s = _stat_arrays(stats, variable, x.ndim)
    return (x - m) / s


def denormalize(x, stats: NormStats, variable: int | None = None):
    x = np.asarray(x, dtype=np.float64)
    m, s = _stat_arrays(stats, variable, x.ndim)
    return x * s + m


def horizontal_flip(pair, negate_index: int | None = 1):
    """Mirror both members of ``(x_k, x_next)`` about the vertical centreline.

    ``negate_index`` is the variable axis entry holding horizontal velocity
    (or momentum); it changes sign so the mirrored pair still solves the
    same equations.  Pass ``None`` for single-variable fields.
    """
    out = []
    for x in pair:
        y = np.flip(np.asarray(x), axis=-1).copy()
        if negate_index is not None:
            y[..., negate_index, :, :] *= -1
        out.append(y)
    return tuple(out)


def split_dataset(records: Sequence, ratio: float = 0.8, seed: int = 0, n_val: int | None = None):
    """Shuffle whole trajectories and split them into (train, val)."""
    n = len(records)
    if n < 2:
        raise DataError(f"need at least 2 records to split, got {n}")
    if n_val is None:
        if not 0 < ratio < 1:
            raise ConfigError(f"ratio must lie in (0, 1), got {ratio}")
        n_train = min(max(int(math.floor(ratio * n + 0.5)), 1), n - 1)
    else:
        if not 0 < n_val < n:
            raise ConfigError(f"n_val must lie in (0, {n}), got {n_val}")
        n_train = n - n_val
    order = np.random.default_rng(seed).permutation(n)
    train = [records[i] for i in sorted(order[:n_train])]
    val = [records[i] for i in sorted(order[n_train:])]
    return train, val


def split_indices(n: int, ratio: float = 0.8, seed: int = 0, n_val: int | None = None):
    train, val = split_dataset(list(range(n)), ratio, seed, n_val)
    return train, val

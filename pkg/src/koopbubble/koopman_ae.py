"""Partial-CNN Koopman autoencoder, its five-term objective, and training."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (
    AdamState,
    Tensor,
    adam_step,
    backward,
    conv2d,
    dense,
    flatten,
    load_parameters,
    maxpool2d,
    mse,
    no_grad,
    residual_block,
    save_parameters,
    transposed_conv2d,
)
from .autodiff.optim import DEFAULT_LEARNING_RATE
from .errors import ConfigError, ShapeError, TrainingAborted

log = logging.getLogger(__name__)

LOSS_NAMES = ("recon", "pred", "lin", "noise", "repl")


@dataclass(frozen=True)
class AEConfig:
    input_hw: tuple[int, int] = (32, 32)
    in_channels: int = 1
    channels: tuple[int, ...] = (8, 16)
    koopman_dim: int = 64
    decoder_out_channels: int = 4
    m: int = 1
    weights: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 1.0)
    learning_rate: float = DEFAULT_LEARNING_RATE
    patience: int = 10
    max_epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    koopman_init_noise: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        object.__setattr__(self, "weights", tuple(float(v) for v in self.weights))
        if not self.channels:
            raise ConfigError("at least one DownBlock is required")
        if self.koopman_dim <= 0 or self.m < 1:
            raise ConfigError("koopman_dim must be positive and m >= 1")
        if len(self.weights) != 5 or min(self.weights) < 0:
            raise ConfigError(f"need five non-negative loss weights, got {self.weights}")
        if self.batch_size < 1 or self.patience < 0 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1, patience >= 0")
        h, w = self.input_hw
        for _ in self.channels:
            if h < 2 or w < 2:
                raise ConfigError(f"input {self.input_hw} too small for {len(self.channels)} DownBlocks")
            h, w = h // 2, w // 2

    @classmethod
    def paper(cls, **overrides) -> "AEConfig":
        base = dict(input_hw=(100, 100), channels=(64, 128, 256, 512), koopman_dim=4096)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "AEConfig":
        return cls(**overrides)

    def spatial_sizes(self) -> list[tuple[int, int]]:
        """Input size followed by the size after each DownBlock."""
        sizes = [self.input_hw]
        h, w = self.input_hw
        for _ in self.channels:
            h, w = h // 2, w // 2
            sizes.append((h, w))
        return sizes

    @property
    def flatten_size(self) -> int:
        h, w = self.spatial_sizes()[-1]
        return self.channels[-1] * h * w

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AEConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LossBreakdown:
    recon: float
    pred: float
    lin: float
    noise: float
    repl: float
    total: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def mean(cls, items: Sequence["LossBreakdown"], counts: Sequence[int]) -> "LossBreakdown":
        n = float(sum(counts))
        vals = {
            k: math.fsum(getattr(b, k) * c for b, c in zip(items, counts)) / n
            for k in LOSS_NAMES + ("total",)
        }
        return cls(**vals)


class KoopmanAE:
    """Encoder g, bias-free square Koopman matrix K, decoder g^-1.

    Reconstruction bypasses K; prediction applies it ``m`` times between
    encoder and decoder.
    """

    def __init__(self, config: AEConfig, rng: np.random.Generator | None = None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(config.seed) if rng is None else rng
        self._build(rng)

    # construction --------------------------------------------------------
    def _add(self, name, shape, fan_in, rng, zero=False):
        if zero:
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _conv(self, name, c_in, c_out, k, rng):
        self._add(f"{name}.weight", (c_out, c_in, k, k), c_in * k * k, rng)
        self._add(f"{name}.bias", (c_out,), 1, rng, zero=True)

    def _res(self, name, c_in, c_out, rng):
        self._conv(f"{name}.conv1", c_in, c_out, 3, rng)
        self._conv(f"{name}.conv2", c_out, c_out, 3, rng)
        if c_in != c_out:
            self._conv(f"{name}.skip", c_in, c_out, 1, rng)

    def _build(self, rng):
        cfg = self.config
        c_prev = cfg.in_channels
        for i, c in enumerate(cfg.channels, start=1):
            self._res(f"enc.down{i}.res1", c_prev, c, rng)
            self._res(f"enc.down{i}.res2", c, c, rng)
            c_prev = c
        flat, kd = cfg.flatten_size, cfg.koopman_dim
        self._add("enc.latent.weight", (kd, flat), flat, rng)
        self._add("enc.latent.bias", (kd,), 1, rng, zero=True)
        k = np.eye(kd) + cfg.koopman_init_noise * rng.standard_normal((kd, kd))
        self.params["koopman.weight"] = Tensor(k, requires_grad=True, name="koopman.weight")
        self._add("dec.latent.weight", (flat, kd), kd, rng)
        self._add("dec.latent.bias", (flat,), 1, rng, zero=True)
        for i in range(len(cfg.channels), 0, -1):
            c_in = cfg.channels[i - 1]
            c_out = cfg.channels[i - 2] if i > 1 else cfg.decoder_out_channels
            self._add(f"dec.up{i}.tconv.weight", (c_in, c_out, 2, 2), c_in * 4, rng)
            self._add(f"dec.up{i}.tconv.bias", (c_out,), 1, rng, zero=True)
            self._res(f"dec.up{i}.res1", c_out, c_out, rng)
            self._res(f"dec.up{i}.res2", c_out, c_out, rng)
        self._conv("dec.out", cfg.decoder_out_channels, cfg.in_channels, 3, rng)

    # building blocks -----------------------------------------------------
    def _p(self, name):
        return self.params[name]

    def _residual(self, name, x):
        p = self.params.get
        return residual_block(
            x, p(f"{name}.conv1.weight"), p(f"{name}.conv1.bias"),
            p(f"{name}.conv2.weight"), p(f"{name}.conv2.bias"),
            p(f"{name}.skip.weight"), p(f"{name}.skip.bias"),
        )

    def _as_batch(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        cfg = self.config
        expected = (cfg.in_channels,) + cfg.input_hw
        if x.ndim == 2 and cfg.in_channels == 1:
            x = x.reshape((1, 1) + x.shape)
            single = "hw"
        elif x.ndim == 3:
            x = x.reshape((1,) + x.shape)
            single = "chw"
        else:
            single = None
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"model expects input {expected} (optionally batched), got {x.shape}")
        return x, single

    # public API ----------------------------------------------------------
    def encode(self, x, trace: list | None = None) -> Tensor:
        """DownBlocks, flatten, Latent 1.  Unbatched input gives a 1-D latent."""
        x, single = self._as_batch(x)
        h = x
        for i in range(1, len(self.config.channels) + 1):
            h = self._residual(f"enc.down{i}.res1", h)
            h = self._residual(f"enc.down{i}.res2", h)
            h = maxpool2d(h)
            if trace is not None:
                trace.append((f"DownBlock {i}", h.shape[1:]))
        h = flatten(h)
        if trace is not None:
            trace.append(("Flatten (Encoder Output)", h.shape[1:]))
        z = dense(h, self._p("enc.latent.weight"), self._p("enc.latent.bias"))
        if trace is not None:
            trace.append(("Linear (Latent 1)", self._p("enc.latent.weight").shape[::-1]))
        return z.reshape(z.shape[1:]) if single else z

    def apply_koopman(self, z, m: int | None = None) -> Tensor:
        k = self._p("koopman.weight")
        for _ in range(self.config.m if m is None else m):
            z = dense(z, k)
        return z

    def decode(self, z, trace: list | None = None) -> Tensor:
        """Latent 2, reshape, UpBlocks, channel-merging output convolution."""
        cfg = self.config
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.shape[-1:] != (cfg.koopman_dim,) or z.ndim not in (1, 2):
            raise ShapeError(f"decode expects latent of length {cfg.koopman_dim}, got {z.shape}")
        single = z.ndim == 1
        if single:
            z = z.reshape((1, cfg.koopman_dim))
        sizes = cfg.spatial_sizes()
        h = dense(z, self._p("dec.latent.weight"), self._p("dec.latent.bias"))
        if trace is not None:
            trace.append(("Linear (Latent 2)", self._p("dec.latent.weight").shape[::-1]))
        h = h.reshape((z.shape[0], cfg.channels[-1]) + sizes[-1])
        if trace is not None:
            trace.append(("Reshape (Decoder Input)", h.shape[1:]))
        for i in range(len(cfg.channels), 0, -1):
            h = transposed_conv2d(
                h, self._p(f"dec.up{i}.tconv.weight"), sizes[i - 1], self._p(f"dec.up{i}.tconv.bias")
            )
            h = self._residual(f"dec.up{i}.res1", h)
            h = self._residual(f"dec.up{i}.res2", h)
            if trace is not None:
                trace.append((f"UpBlock {i}", h.shape[1:]))
        h = conv2d(h, self._p("dec.out.weight"), self._p("dec.out.bias"))
        if trace is not None:
            trace.append(("Output", h.shape[1:]))
        return h.reshape(h.shape[1:]) if single else h

    def reconstruct(self, x) -> Tensor:
        x, single = self._as_batch(x)
        out = self.decode(self.encode(x))
        return _unbatch(out, single)

    def predict_next(self, x) -> Tensor:
        x, single = self._as_batch(x)
        out = self.decode(self.apply_koopman(self.encode(x)))
        return _unbatch(out, single)

    def shape_trace(self) -> list[tuple[str, tuple]]:
        """Forward one zero input and list each stage's per-sample output shape."""
        cfg = self.config
        trace = [("Input", (cfg.in_channels,) + cfg.input_hw)]
        with no_grad():
            z = self.encode(np.zeros((1, cfg.in_channels) + cfg.input_hw), trace)
            trace.append(("Linear (K^m)", self._p("koopman.weight").shape))
            self.decode(self.apply_koopman(z), trace)
        return trace

    def koopman_matrix(self) -> np.ndarray:
        return self._p("koopman.weight").data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ShapeError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"checkpoint {k} has shape {v.shape}, model expects {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _unbatch(t: Tensor, single):
    if single == "hw":
        return t.reshape(t.shape[2:])
    if single == "chw":
        return t.reshape(t.shape[1:])
    return t


def compute_losses(model, x_k, x_next, weights=None, x_tilde=None):
    """Five loss terms and their weighted total for a batch of state pairs.

    ``x_tilde`` (the predicted next state) is treated as a constant; when not
    given it is ``decode(K^m encode(x_k))`` with its graph cut off.  Returns
    ``(total_tensor, LossBreakdown)``.
    """
    if weights is None:
        weights = getattr(getattr(model, "config", None), "weights", (1.0,) * 5)
    x_k = x_k if isinstance(x_k, Tensor) else Tensor(x_k)
    x_next = x_next if isinstance(x_next, Tensor) else Tensor(x_next)
    if x_k.shape != x_next.shape:
        raise ShapeError(f"state pair shapes differ: {x_k.shape} vs {x_next.shape}")
    z_k = model.encode(x_k)
    z_next = model.encode(x_next)
    kz = model.apply_koopman(z_k)
    x_pred = model.decode(kz)
    recon = mse(x_k, model.decode(z_k))
    pred = mse(x_next, x_pred)
    lin = mse(z_next, kz)
    if x_tilde is None:
        x_tilde = x_pred.detach()
    elif not isinstance(x_tilde, Tensor):
        x_tilde = Tensor(x_tilde)
    z_tilde = model.encode(x_tilde)
    noise = mse(z_tilde, kz)
    repl = mse(z_tilde, z_next)
    terms = (recon, pred, lin, noise, repl)
    total = None
    for w, t in zip(weights, terms):
        part = t * float(w)
        total = part if total is None else total + part
    return total, LossBreakdown(*(t.item() for t in terms), total.item())


def koopman_spectrum(model) -> np.ndarray:
    """Eigenvalues of K ordered by modulus (descending), then by angle."""
    k = model.koopman_matrix() if hasattr(model, "koopman_matrix") else np.asarray(model)
    try:
        lam = np.linalg.eigvals(k)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigensolver failed: {exc}") from exc
    order = np.lexsort((np.angle(lam), -np.round(np.abs(lam), 10)))  # conjugates tie on modulus
    return lam[order]


# training ------------------------------------------------------------------

@dataclass
class TrainingReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_total: float = math.inf
    stopped_epoch: int = 0
    steps: int = 0
    wall_time_s: float = 0.0
    best_params: dict | None = None

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_val_total": self.best_val_total,
            "stopped_epoch": self.stopped_epoch,
            "steps": self.steps,
        }


def make_pairs(sequences: Sequence[np.ndarray]) -> list[tuple[int, int]]:
    """Index pairs (trajectory, t) for every consecutive (t, t+1) state."""
    return [(i, t) for i, s in enumerate(sequences) for t in range(len(s) - 1)]


def _batch_arrays(sequences, pairs, flips=None):
    xk = np.stack([sequences[i][t] for i, t in pairs])
    xn = np.stack([sequences[i][t + 1] for i, t in pairs])
    if flips is not None and np.any(flips):
        xk[flips] = xk[flips][..., ::-1]
        xn[flips] = xn[flips][..., ::-1]
    return xk[:, None], xn[:, None]


def evaluate_objective(model, sequences, batch_size: int = 16) -> LossBreakdown:
    pairs = make_pairs(sequences)
    if not pairs:
        raise ConfigError("need at least one trajectory with two states")
    parts, counts = [], []
    with no_grad():
        for s in range(0, len(pairs), batch_size):
            chunk = pairs[s:s + batch_size]
            xk, xn = _batch_arrays(sequences, chunk)
            _, b = compute_losses(model, xk, xn)
            parts.append(b)
            counts.append(len(chunk))
    return LossBreakdown.mean(parts, counts)


def train(
    model: KoopmanAE,
    train_seqs: Sequence[np.ndarray],
    val_seqs: Sequence[np.ndarray],
    config: AEConfig | None = None,
    optimizer: AdamState | None = None,
    on_epoch=None,
) -> tuple[TrainingReport, AdamState]:
    """Adam on the weighted objective with pairwise random flips and early stopping.

    ``train_seqs``/``val_seqs`` are normalized single-variable trajectories of
    shape ``(T, H, W)``.  Training stops once ``patience`` consecutive epochs
    pass without a new best validation total (``patience=0`` stops after the
    first epoch).  The best parameters are kept in ``report.best_params``.
    """
    cfg = config or model.config
    pairs = make_pairs(train_seqs)
    if not pairs:
        raise ConfigError("training data needs at least one trajectory with two states")
    opt = optimizer if optimizer is not None else AdamState(lr=cfg.learning_rate)
    report = TrainingReport(steps=opt.step)
    start = time.perf_counter()
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(pairs))
        flips = rng.random(len(pairs)) < 0.5
        parts, counts = [], []
        for s in range(0, len(order), cfg.batch_size):
            sel = order[s:s + cfg.batch_size]
            xk, xn = _batch_arrays(train_seqs, [pairs[j] for j in sel], flips[sel])
            model.zero_grad()
            total, b = compute_losses(model, xk, xn, cfg.weights)
            if not math.isfinite(b.total):
                report.wall_time_s = time.perf_counter() - start
                raise TrainingAborted(
                    f"non-finite objective at epoch {epoch}, step {opt.step}: {b}",
                    checkpoint=report.best_params, report=report,
                )
            backward(total)
            adam_step(model.params, opt)
            parts.append(b)
            counts.append(len(sel))
        train_b = LossBreakdown.mean(parts, counts)
        val_b = evaluate_objective(model, val_seqs, cfg.batch_size) if val_seqs else train_b
        entry = {"epoch": epoch, "train": train_b.as_dict(), "val": val_b.as_dict(), "steps": opt.step}
        report.epochs.append(entry)
        report.stopped_epoch = epoch
        report.steps = opt.step
        if val_b.total < report.best_val_total:
            report.best_val_total = val_b.total
            report.best_epoch = epoch
            report.best_params = model.state_dict()
            since_best = 0
        else:
            since_best += 1
        log.info("epoch %d train %.6g val %.6g", epoch, train_b.total, val_b.total)
        if on_epoch is not None:
            on_epoch(entry)
        if since_best >= cfg.patience:
            break
    report.wall_time_s = time.perf_counter() - start
    return report, opt


def save_model(directory, model: KoopmanAE, params: dict | None = None, optimizer: AdamState | None = None):
    """Write ``model.kprm`` + ``model.json`` (and ``optimizer.kprm``) into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_parameters(d / "model.kprm", params if params is not None else model.state_dict())
    (d / "model.json").write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n")
    if optimizer is not None:
        save_parameters(d / "optimizer.kprm", optimizer.to_arrays())


def load_model(directory) -> KoopmanAE:
    d = Path(directory)
    cfg = AEConfig.from_dict(json.loads((d / "model.json").read_text()))
    model = KoopmanAE(cfg)
    model.load_state_dict(load_parameters(d / "model.kprm"))
    return model


def load_optimizer(directory) -> AdamState | None:
    path = Path(directory) / "optimizer.kprm"
    return AdamState.from_arrays(load_parameters(path)) if path.exists() else None

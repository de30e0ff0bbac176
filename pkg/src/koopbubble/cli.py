"""Command-line front end: generate, train, evaluate, rollout, dmd, export.

Every subcommand resolves its options from preset defaults, then an optional
``--config`` JSON file, then explicit flags, and echoes the result to
``<out>/config.json``.  Wall-clock information goes to ``<out>/timing.json``
so that every other output is a pure function of the resolved config.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import datafile, dmd, heatmap, koopman_ae, scenario
from .autodiff import no_grad
from .autodiff.optim import DEFAULT_LEARNING_RATE
from .errors import ConfigError, DataError, GenerationError, NumericalError, TrainingAborted
from .euler import Grid2D, PhysConstants
from .koopman_ae import AEConfig, KoopmanAE

log = logging.getLogger("koopbubble")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

PRESETS = {
    "desk": {"grid": 32, "n_trajectories": 20, "n_steps": 20, "n_val": None},
    "paper": {"grid": 100, "n_trajectories": 940, "n_steps": 215, "n_val": 240},
}

DEFAULTS = {
    "generate": lambda p: {
        "out": "run/data", "seed": 0, "n_trajectories": PRESETS[p]["n_trajectories"],
        "n_steps": PRESETS[p]["n_steps"], "nx": PRESETS[p]["grid"], "nz": PRESETS[p]["grid"],
        "output_interval": 5.0, "cfl": 0.4, "ratio": 0.8, "n_val": PRESETS[p]["n_val"],
        "dtype": "f32",
    },
    "train": lambda p: {
        "out": "run/model", "seed": 0, "data": "run/data", "variable": scenario.THETA,
        "lr": DEFAULT_LEARNING_RATE, "patience": 10, "epochs": 50, "batch_size": 16, "m": 1,
        "weights": [1.0] * 5, "resume": None,
    },
    "evaluate": lambda p: {
        "out": "run/eval", "seed": 0, "data": "run/data", "checkpoint": "run/model", "split": "val",
    },
    "rollout": lambda p: {
        "out": "run/rollout", "seed": 0, "data": "run/data", "checkpoint": "run/model",
        "split": "val", "record": 0, "steps": 215, "latent_rollout": False,
    },
    "dmd": lambda p: {
        "out": "run/dmd", "seed": 0, "data": "run/data", "split": "val", "record": 0,
        "variable": scenario.THETA, "rank": None, "n_modes": 4,
    },
    "export": lambda p: {
        "out": "run/export", "seed": 0, "input": None, "record": 0, "step": 0,
        "variable": scenario.THETA, "range": None, "name": "field",
    },
}


# ----------------------------------------------------------------------------
# helpers

def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


class _Timer:
    def __init__(self, out: Path):
        self.out = out
        self.started = _now()
        self.t0 = time.perf_counter()
        self.extra = {}

    def finish(self):
        _write_json(self.out / "timing.json", {
            "started": self.started, "finished": _now(),
            "wall_time_s": time.perf_counter() - self.t0, **self.extra,
        })


def _prepare_out(cfg) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    _write_json(out / "config.json", vars(cfg))
    return out


def _load_split(data_dir, split: str):
    if split not in ("train", "val"):
        raise ConfigError(f"split must be 'train' or 'val', got {split!r}")
    path = Path(data_dir) / f"{split}.kbub"
    if not path.exists():
        raise DataError(f"dataset file {path} not found")
    return datafile.read_dataset(path)


def _sequences(records, stats, variable: int):
    return [
        scenario.normalize(scenario.transform_fields(r.states.astype(np.float64))[:, variable], stats, variable)
        for r in records
    ]


def _load_stats(ckpt: Path) -> scenario.NormStats:
    path = ckpt / "norm_stats.json"
    if not path.exists():
        raise DataError(f"{path} missing; checkpoint directory incomplete")
    d = json.loads(path.read_text())
    return scenario.NormStats(tuple(d["mean"]), tuple(d["std"]))


def _checkpoint_meta(ckpt: Path) -> dict:
    path = ckpt / "train_meta.json"
    return json.loads(path.read_text()) if path.exists() else {"variable": scenario.THETA}


def _load_checkpoint(ckpt) -> KoopmanAE:
    ckpt = Path(ckpt)
    if not (ckpt / "model.kprm").exists():
        raise DataError(f"no model checkpoint in {ckpt}")
    return koopman_ae.load_model(ckpt)


def _check_dims(model: KoopmanAE, records):
    if records and records[0].states.shape[-2:] != model.config.input_hw:
        raise ConfigError(
            f"data grid {records[0].states.shape[-2:]} does not match model input {model.config.input_hw}"
        )


# ----------------------------------------------------------------------------
# subcommands

def cmd_generate(cfg) -> dict:
    out = _prepare_out(cfg)
    timer = _Timer(out)
    grid = Grid2D(int(cfg.nx), int(cfg.nz))
    consts = PhysConstants()
    sc = scenario.ScenarioConfig(
        seed=int(cfg.seed), n_steps=int(cfg.n_steps), output_interval_s=float(cfg.output_interval),
        grid=grid, consts=consts, cfl=float(cfg.cfl),
    )
    dtype = {"f32": np.float32, "f64": np.float64}.get(cfg.dtype)
    if dtype is None:
        raise ConfigError(f"dtype must be f32 or f64, got {cfg.dtype!r}")
    records, entries, discarded = [], [], []
    for i in range(int(cfg.n_trajectories)):
        try:
            rec = scenario.generate_trajectory(sc, index=i)
        except GenerationError as exc:
            log.warning("discarding scenario %d: %s", i, exc)
            discarded.append(i)
            continue
        records.append(rec)
        entries.append({
            "scenario": i, "n_saved": rec.n_saved, "truncated": rec.truncated,
            "specs": [vars(s) for s in rec.specs],
        })
        log.info("scenario %d: %d states%s", i, rec.n_saved, " (truncated)" if rec.truncated else "")
    if not records:
        raise GenerationError("all scenarios failed")
    train_idx, val_idx = scenario.split_indices(len(records), float(cfg.ratio), int(cfg.seed), cfg.n_val)
    train = [records[i] for i in train_idx]
    val = [records[i] for i in val_idx]
    stats = scenario.compute_norm_stats(train)
    datafile.write_dataset(train, stats, out / "train.kbub", dtype=dtype)
    datafile.write_dataset(val, stats, out / "val.kbub", dtype=dtype)
    for i in train_idx:
        entries[i]["split"] = "train"
    for i in val_idx:
        entries[i]["split"] = "val"
    meta = {
        "seed": int(cfg.seed),
        "grid": {"nx": grid.nx, "nz": grid.nz, "lx": grid.lx, "lz": grid.lz},
        "constants": {k: getattr(consts, k) for k in ("g", "R_d", "c_p", "p0", "theta0", "gamma")},
        "domains": {"hot": sc.hot.to_dict(), "cold": sc.cold.to_dict()},
        "n_steps": sc.n_steps, "output_interval_s": sc.output_interval_s, "cfl": sc.cfl,
        "norm_stats": stats.to_dict(),
        "records": entries,
        "truncation": {
            "truncated": sum(e["truncated"] for e in entries),
            "discarded": discarded,
        },
        "files": {"train": "train.kbub", "val": "val.kbub"},
        "timestamps": "timing.json",
    }
    _write_json(out / "dataset.json", meta)
    timer.finish()
    return meta


def cmd_train(cfg) -> dict:
    out = _prepare_out(cfg)
    timer = _Timer(out)
    train_recs, stats = _load_split(cfg.data, "train")
    val_recs, _ = _load_split(cfg.data, "val")
    variable = int(cfg.variable)
    grid_hw = tuple(train_recs[0].states.shape[-2:]) if train_recs else None
    if cfg.resume:
        model = _load_checkpoint(cfg.resume)
        optimizer = koopman_ae.load_optimizer(cfg.resume)
        base = model.config
    else:
        maker = AEConfig.paper if cfg.preset == "paper" else AEConfig.desk
        base = maker(input_hw=grid_hw) if grid_hw else maker()
        model = None
        optimizer = None
    mcfg = AEConfig.from_dict({
        **base.to_dict(),
        "learning_rate": float(cfg.lr), "patience": int(cfg.patience), "max_epochs": int(cfg.epochs),
        "batch_size": int(cfg.batch_size), "seed": int(cfg.seed), "m": int(cfg.m),
        "weights": list(cfg.weights),
    })
    if model is None:
        model = KoopmanAE(mcfg)
    else:
        model.config = mcfg
        if optimizer is not None:
            optimizer.lr = mcfg.learning_rate
    _check_dims(model, train_recs)
    train_seqs = _sequences(train_recs, stats, variable)
    val_seqs = _sequences(val_recs, stats, variable)
    _write_json(out / "norm_stats.json", stats.to_dict())
    _write_json(out / "train_meta.json", {"variable": variable, "data": str(cfg.data)})
    try:
        report, opt = koopman_ae.train(model, train_seqs, val_seqs, mcfg, optimizer)
    except TrainingAborted as exc:
        if exc.checkpoint is not None:
            koopman_ae.save_model(out, model, exc.checkpoint)
        if exc.report is not None:
            _write_json(out / "report.json", {**exc.report.to_json(), "aborted": str(exc)})
        timer.finish()
        raise
    koopman_ae.save_model(out, model, report.best_params, opt)
    doc = report.to_json()
    _write_json(out / "report.json", doc)
    timer.extra["train_wall_time_s"] = report.wall_time_s
    timer.finish()
    return doc


def field_metrics(estimate, truth) -> tuple[float, float]:
    """Mean squared error and 2-norm (Frobenius) of ``estimate - truth``."""
    err = np.asarray(estimate, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    return float(np.mean(err * err)), float(np.linalg.norm(err))


def _pairs_eval(model, seqs, batch: int = 16):
    rows = []
    with no_grad():
        for ti, s in enumerate(seqs):
            for t0 in range(0, len(s) - 1, batch):
                xk = s[t0:min(t0 + batch, len(s) - 1)]
                xn = s[t0 + 1:t0 + 1 + len(xk)]
                rec = model.reconstruct(xk[:, None]).data[:, 0]
                pred = model.predict_next(xk[:, None]).data[:, 0]
                for j in range(len(xk)):
                    r_mse, r_l2 = field_metrics(rec[j], xk[j])
                    p_mse, p_l2 = field_metrics(pred[j], xn[j])
                    rows.append({
                        "trajectory": ti, "t": t0 + j,
                        "recon_mse": r_mse, "recon_l2": r_l2, "pred_mse": p_mse, "pred_l2": p_l2,
                    })
    return rows


def cmd_evaluate(cfg) -> dict:
    out = _prepare_out(cfg)
    timer = _Timer(out)
    ckpt = Path(cfg.checkpoint)
    model = _load_checkpoint(ckpt)
    stats = _load_stats(ckpt)
    variable = int(_checkpoint_meta(ckpt)["variable"])
    records, _ = _load_split(cfg.data, cfg.split)
    _check_dims(model, records)
    seqs = _sequences(records, stats, variable)
    rows = _pairs_eval(model, seqs, model.config.batch_size)
    if not rows:
        raise DataError("no consecutive state pairs to evaluate")
    keys = ("recon_mse", "recon_l2", "pred_mse", "pred_l2")
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    losses = koopman_ae.evaluate_objective(model, seqs, model.config.batch_size)
    doc = {"n_samples": len(rows), "aggregate": aggregate, "losses": losses.as_dict(), "per_sample": rows}
    _write_json(out / "metrics.json", doc)
    timer.finish()
    return doc


def rollout(model: KoopmanAE, x0: np.ndarray, steps: int, latent: bool = False):
    """Closed-loop prediction from ``x0``.

    Entry 0 is the reconstruction of ``x0``; entry k is the k-th prediction,
    obtained by feeding each decoded state back through the model (or, with
    ``latent``, by applying K k times to the initial encoding).  Stops early
    at the first non-finite state; returns ``(states, last_finite_step)``.
    """
    outs = []
    with no_grad():
        x = x0
        z = model.encode(x0) if latent else None
        for k in range(steps + 1):
            if latent:
                y = model.decode(z if k == 0 else model.apply_koopman(z, m=k * model.config.m))
            elif k == 0:
                y = model.reconstruct(x)
            else:
                y = model.predict_next(x)
            y = y.data
            if not np.all(np.isfinite(y)):
                return np.stack(outs) if outs else np.empty((0,) + x0.shape), k - 1
            outs.append(y)
            if k > 0:
                x = y
    return np.stack(outs), steps


def cmd_rollout(cfg) -> dict:
    out = _prepare_out(cfg)
    timer = _Timer(out)
    ckpt = Path(cfg.checkpoint)
    model = _load_checkpoint(ckpt)
    stats = _load_stats(ckpt)
    variable = int(_checkpoint_meta(ckpt)["variable"])
    records, _ = _load_split(cfg.data, cfg.split)
    _check_dims(model, records)
    if not 0 <= int(cfg.record) < len(records):
        raise ConfigError(f"record {cfg.record} out of range (have {len(records)})")
    truth = _sequences([records[int(cfg.record)]], stats, variable)[0]
    steps = int(cfg.steps)
    if steps < 0:
        raise ConfigError("steps must be non-negative")
    states, last = rollout(model, truth[0], steps, bool(cfg.latent_rollout))
    curve = [
        {"step": k, "mse": float(np.mean((states[k] - truth[k]) ** 2))}
        for k in range(min(len(states), len(truth)))
    ]
    np.save(out / "rollout.npy", scenario.denormalize(states, stats, variable))
    doc = {
        "record": int(cfg.record), "steps_requested": steps, "last_finite_step": last,
        "finite": last == steps, "latent_rollout": bool(cfg.latent_rollout),
        "variable": scenario.VARIABLES[variable], "divergence": curve,
    }
    _write_json(out / "rollout.json", doc)
    timer.finish()
    if last != steps:
        raise NumericalError(f"rollout produced a non-finite state at step {last + 1}")
    return doc


def cmd_dmd(cfg) -> dict:
    out = _prepare_out(cfg)
    timer = _Timer(out)
    records, stats = _load_split(cfg.data, cfg.split)
    if not 0 <= int(cfg.record) < len(records):
        raise ConfigError(f"record {cfg.record} out of range (have {len(records)})")
    rec = records[int(cfg.record)]
    snaps = dmd.build_snapshots(rec, int(cfg.variable), stats)
    result = dmd.fit_dmd(snaps, None if cfg.rank is None else int(cfg.rank))
    shape = rec.states.shape[-2:]
    dmd.write_spectrum(out / "spectrum.json", result, {
        "record": int(cfg.record), "split": cfg.split, "variable": scenario.VARIABLES[int(cfg.variable)],
        "field_shape": list(shape),
    })
    dmd.write_modes(out / "modes.bin", result, shape)
    for i in range(min(int(cfg.n_modes), result.rank)):
        heatmap.export_heatmap(result.modes[:, i].real.reshape(shape), out / f"mode_{i:03d}.pgm")
    timer.finish()
    return result.to_json()


def cmd_export(cfg) -> dict:
    if not cfg.input:
        raise ConfigError("export needs --input (a .kbub dataset or .npy array)")
    out = _prepare_out(cfg)
    src = Path(cfg.input)
    if not src.exists():
        raise DataError(f"{src} not found")
    if src.suffix == ".npy":
        arr = np.load(src)
        field = arr[int(cfg.step)] if arr.ndim == 3 else arr
    else:
        records, _ = datafile.read_dataset(src)
        rec = records[int(cfg.record)]
        field = scenario.transform_fields(rec.states[int(cfg.step)].astype(np.float64))[int(cfg.variable)]
    vrange = None
    if cfg.range is not None:
        vrange = [float(v) for v in (cfg.range.split(",") if isinstance(cfg.range, str) else cfg.range)]
        if len(vrange) != 2:
            raise ConfigError(f"range needs two values lo,hi; got {cfg.range!r}")
    pgm, csv = heatmap.export_heatmap(field, out / f"{cfg.name}.pgm", vrange)
    return {"pgm": str(pgm), "csv": str(csv)}


COMMANDS = {
    "generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
    "rollout": cmd_rollout, "dmd": cmd_dmd, "export": cmd_export,
}


# ----------------------------------------------------------------------------
# argument parsing

def _weights(text):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 5:
        raise argparse.ArgumentTypeError("need five comma-separated weights")
    return vals


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = argparse.ArgumentParser(prog="koopbubble", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON file of option values")
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--out", default=S, help="output directory")
        p.add_argument("--preset", choices=sorted(PRESETS), default=S)
        return p

    g = common(sub.add_parser("generate", help="simulate bubble trajectories into a dataset"))
    g.add_argument("--n-trajectories", type=int, default=S)
    g.add_argument("--n-steps", type=int, default=S)
    g.add_argument("--nx", type=int, default=S)
    g.add_argument("--nz", type=int, default=S)
    g.add_argument("--output-interval", type=float, default=S)
    g.add_argument("--cfl", type=float, default=S)
    g.add_argument("--ratio", type=float, default=S)
    g.add_argument("--n-val", type=int, default=S)
    g.add_argument("--dtype", choices=["f32", "f64"], default=S)

    t = common(sub.add_parser("train", help="train the Koopman autoencoder"))
    t.add_argument("--data", default=S)
    t.add_argument("--variable", type=int, default=S)
    t.add_argument("--lr", type=float, default=S)
    t.add_argument("--patience", type=int, default=S)
    t.add_argument("--epochs", type=int, default=S)
    t.add_argument("--batch-size", type=int, default=S)
    t.add_argument("--m", type=int, default=S)
    t.add_argument("--weights", type=_weights, default=S, help="a1,a2,a3,a4,a5")
    t.add_argument("--resume", default=S, help="checkpoint directory to continue from")

    e = common(sub.add_parser("evaluate", help="reconstruction/prediction metrics"))
    e.add_argument("--data", default=S)
    e.add_argument("--checkpoint", default=S)
    e.add_argument("--split", choices=["train", "val"], default=S)

    r = common(sub.add_parser("rollout", help="closed-loop prediction from an initial state"))
    r.add_argument("--data", default=S)
    r.add_argument("--checkpoint", default=S)
    r.add_argument("--split", choices=["train", "val"], default=S)
    r.add_argument("--record", type=int, default=S)
    r.add_argument("--steps", type=int, default=S)
    r.add_argument("--latent-rollout", action="store_true", default=S)

    d = common(sub.add_parser("dmd", help="exact DMD of one trajectory"))
    d.add_argument("--data", default=S)
    d.add_argument("--split", choices=["train", "val"], default=S)
    d.add_argument("--record", type=int, default=S)
    d.add_argument("--variable", type=int, default=S)
    d.add_argument("--rank", type=int, default=S)
    d.add_argument("--n-modes", type=int, default=S)

    x = common(sub.add_parser("export", help="write a field as PGM + CSV"))
    x.add_argument("--input", default=S)
    x.add_argument("--record", type=int, default=S)
    x.add_argument("--step", type=int, default=S)
    x.add_argument("--variable", type=int, default=S)
    x.add_argument("--range", default=S, help="lo,hi (default: field min/max)")
    x.add_argument("--name", default=S)
    return parser


def resolve_config(args: argparse.Namespace) -> SimpleNamespace:
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    command = flags.pop("command")
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        if file_cfg.get("command", command) != command:
            raise ConfigError(f"config is for {file_cfg['command']!r}, not {command!r}")
    preset = flags.get("preset", file_cfg.get("preset", "desk"))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    resolved = DEFAULTS[command](preset)
    unknown = set(file_cfg) - set(resolved) - {"command", "preset"}
    if unknown:
        raise ConfigError(f"unknown {command} options in config: {sorted(unknown)}")
    resolved.update({k: v for k, v in file_cfg.items() if k != "command"})
    resolved.update(flags)
    resolved["preset"] = preset
    resolved["command"] = command
    return SimpleNamespace(**dict(sorted(resolved.items())))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

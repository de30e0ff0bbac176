import json
from pathlib import Path

import numpy as np
import pytest

from koopbubble import cli, euler
from koopbubble.autodiff import load_parameters, no_grad, save_parameters
from koopbubble.datafile import read_dataset, write_dataset
from koopbubble.errors import StabilityError
from koopbubble.euler import State2D
from koopbubble.koopman_ae import load_model
from koopbubble.scenario import NormStats, TrajectoryRecord, normalize, transform_fields

GEN = ["--n-trajectories", "3", "--n-steps", "3", "--nx", "16", "--nz", "16"]
TRAIN = ["--epochs", "2", "--patience", "0", "--batch-size", "4"]


def run(*args):
    return cli.main([str(a) for a in args])


def outputs(d: Path):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "timing.json"}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("generate", "--out", root / "data", "--seed", 3, *GEN) == 0
    assert run("train", "--data", root / "data", "--out", root / "model", *TRAIN) == 0
    return root


class TestGenerate:
    def test_outputs_and_sidecar(self, workspace):
        d = workspace / "data"
        assert {"train.kbub", "val.kbub", "dataset.json", "config.json", "timing.json"} <= {p.name for p in d.iterdir()}
        meta = json.loads((d / "dataset.json").read_text())
        assert meta["seed"] == 3
        assert meta["domains"]["hot"]["temp_k"] == [303.3, 303.6]
        assert meta["constants"]["gamma"] == pytest.approx(1.4)
        assert len(meta["records"]) == 3
        train, stats = read_dataset(d / "train.kbub")
        val, stats_v = read_dataset(d / "val.kbub")
        assert stats == stats_v and len(train) + len(val) == 3
        timing = json.loads((d / "timing.json").read_text())
        assert timing["wall_time_s"] >= 0 and "started" in timing

    def test_deterministic(self, tmp_path):
        assert run("generate", "--out", tmp_path / "a", "--n-trajectories", 2, "--n-steps", 2, "--nx", 8, "--nz", 8) == 0
        assert run("generate", "--out", tmp_path / "b", "--n-trajectories", 2, "--n-steps", 2, "--nx", 8, "--nz", 8) == 0
        a, b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
        ca, cb = (json.loads(x.pop("config.json")) for x in (a, b))
        assert a == b
        assert {k: v for k, v in ca.items() if k != "out"} == {k: v for k, v in cb.items() if k != "out"}

    def test_config_precedence(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_steps": 4, "n_trajectories": 2, "nx": 8, "nz": 8, "cfl": 0.3}))
        assert run("generate", "--config", cfg, "--n-steps", 1, "--out", tmp_path / "o") == 0
        echo = json.loads((tmp_path / "o" / "config.json").read_text())
        assert echo["n_steps"] == 1 and echo["cfl"] == 0.3 and echo["preset"] == "desk"
        # re-running from the echo reproduces the outputs
        assert run("generate", "--config", tmp_path / "o" / "config.json", "--out", tmp_path / "o2") == 0
        assert {k: v for k, v in outputs(tmp_path / "o").items() if k != "config.json"} == \
            {k: v for k, v in outputs(tmp_path / "o2").items() if k != "config.json"}

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"n_stepz": 4}))
        assert run("generate", "--config", cfg, "--out", tmp_path / "o") == 2
        cfg.write_text("{not json")
        assert run("generate", "--config", cfg, "--out", tmp_path / "o") == 2
        assert run("generate", "--n-steps", 0, "--out", tmp_path / "o") == 2

    def test_truncation_reported(self, tmp_path, monkeypatch):
        calls = {"n": 0}

        def fake(state, interval, grid, consts, cfl=0.4):
            calls["n"] += 1
            if calls["n"] == 100:
                raise StabilityError("boom", time=state.time, last_state=state)
            return State2D.from_array(state.to_array(), state.time + interval)

        monkeypatch.setattr(euler, "advance_output_interval", fake)
        assert run("generate", "--out", tmp_path / "t", "--n-trajectories", 2, "--n-steps", 120,
                   "--nx", 8, "--nz", 8) == 0
        meta = json.loads((tmp_path / "t" / "dataset.json").read_text())
        first = meta["records"][0]
        assert first["truncated"] and first["n_saved"] == 90
        assert meta["truncation"]["truncated"] == 1

    def test_all_failed(self, tmp_path, monkeypatch):
        def fake(state, *a, **k):
            raise StabilityError("boom", time=0.0, last_state=state)

        monkeypatch.setattr(euler, "advance_output_interval", fake)
        assert run("generate", "--out", tmp_path / "t", "--n-trajectories", 2, "--nx", 8, "--nz", 8) == 4


class TestTrain:
    def test_outputs(self, workspace):
        d = workspace / "model"
        for name in ("model.kprm", "model.json", "optimizer.kprm", "norm_stats.json", "report.json", "config.json"):
            assert (d / name).exists()
        report = json.loads((d / "report.json").read_text())
        assert len(report["epochs"]) == 1 and report["best_epoch"] == 1
        assert load_model(d).config.input_hw == (16, 16)

    def test_resume_continues_steps(self, workspace, tmp_path):
        first = json.loads((workspace / "model" / "report.json").read_text())
        assert run("train", "--data", workspace / "data", "--out", tmp_path / "r",
                   "--resume", workspace / "model", *TRAIN) == 0
        second = json.loads((tmp_path / "r" / "report.json").read_text())
        assert second["steps"] == 2 * first["steps"]

    def test_missing_data(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "m") == 3


class TestEvaluate:
    def test_metrics_consistent(self, workspace, tmp_path):
        assert run("evaluate", "--data", workspace / "data", "--checkpoint", workspace / "model",
                   "--out", tmp_path / "e") == 0
        m = json.loads((tmp_path / "e" / "metrics.json").read_text())
        rows = m["per_sample"]
        assert m["n_samples"] == len(rows) > 0
        for key in ("recon_mse", "pred_mse", "recon_l2", "pred_l2"):
            assert abs(m["aggregate"][key] - np.mean([r[key] for r in rows])) <= 1e-12 * max(1.0, m["aggregate"][key])
        assert m["losses"]["pred"] == pytest.approx(m["aggregate"]["pred_mse"], rel=1e-12)

    def test_self_comparison_zero(self):
        f = np.random.default_rng(0).normal(size=(4, 4))
        assert cli.field_metrics(f, f.copy()) == (0.0, 0.0)
        assert cli.field_metrics(np.zeros((3, 3)), np.zeros((3, 3)))[1] == 0.0

    def test_grid_mismatch(self, workspace, tmp_path):
        assert run("generate", "--out", tmp_path / "d8", "--n-trajectories", 2, "--n-steps", 1, "--nx", 8, "--nz", 8) == 0
        assert run("evaluate", "--data", tmp_path / "d8", "--checkpoint", workspace / "model",
                   "--out", tmp_path / "e") == 2


def _truth(workspace, split="val"):
    recs, _ = read_dataset(workspace / "data" / f"{split}.kbub")
    d = json.loads((workspace / "model" / "norm_stats.json").read_text())
    stats = NormStats(tuple(d["mean"]), tuple(d["std"]))
    return normalize(transform_fields(recs[0].states.astype(float))[:, 3], stats, 3), stats


class TestRollout:
    def test_zero_steps_is_reconstruction(self, workspace, tmp_path):
        assert run("rollout", "--data", workspace / "data", "--checkpoint", workspace / "model",
                   "--out", tmp_path / "r", "--steps", 0) == 0
        out = np.load(tmp_path / "r" / "rollout.npy")
        x, stats = _truth(workspace)
        model = load_model(workspace / "model")
        with no_grad():
            rec = model.reconstruct(x[0]).data
        np.testing.assert_allclose(out[0], rec * stats.std[3] + stats.mean[3], rtol=1e-14)
        doc = json.loads((tmp_path / "r" / "rollout.json").read_text())
        assert doc["finite"] and doc["divergence"][0]["step"] == 0

    def test_identity_k_repeats_reconstruction(self, workspace, tmp_path):
        ck = tmp_path / "ck"
        ck.mkdir()
        for name in ("model.json", "norm_stats.json", "train_meta.json"):
            (ck / name).write_bytes((workspace / "model" / name).read_bytes())
        params = load_parameters(workspace / "model" / "model.kprm")
        params["koopman.weight"] = np.eye(params["koopman.weight"].shape[0])
        save_parameters(ck / "model.kprm", params)
        assert run("rollout", "--data", workspace / "data", "--checkpoint", ck, "--out", tmp_path / "r",
                   "--steps", 3) == 0
        states, _ = cli.rollout(load_model(ck), _truth(workspace)[0][0], 3)
        model = load_model(ck)
        x = _truth(workspace)[0][0]
        with no_grad():
            for k in range(1, 4):
                x = model.reconstruct(x).data
                np.testing.assert_array_equal(states[k], x)
        np.testing.assert_array_equal(states[0], states[1])
        assert np.load(tmp_path / "r" / "rollout.npy").shape == (4, 16, 16)

    def test_latent_rollout(self, workspace, tmp_path):
        assert run("rollout", "--data", workspace / "data", "--checkpoint", workspace / "model",
                   "--out", tmp_path / "r", "--steps", 2, "--latent-rollout") == 0
        model = load_model(workspace / "model")
        x = _truth(workspace)[0][0]
        states, _ = cli.rollout(model, x, 2, latent=True)
        K = model.koopman_matrix()
        with no_grad():
            z = model.encode(x).data
            np.testing.assert_allclose(states[2], model.decode(K @ (K @ z)).data, atol=1e-12)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_stops(self, workspace, tmp_path):
        ck = tmp_path / "ck"
        ck.mkdir()
        for name in ("model.json", "norm_stats.json", "train_meta.json"):
            (ck / name).write_bytes((workspace / "model" / name).read_bytes())
        params = load_parameters(workspace / "model" / "model.kprm")
        params["koopman.weight"] = np.full_like(params["koopman.weight"], np.inf)
        save_parameters(ck / "model.kprm", params)
        assert run("rollout", "--data", workspace / "data", "--checkpoint", ck, "--out", tmp_path / "r",
                   "--steps", 10) == 4
        doc = json.loads((tmp_path / "r" / "rollout.json").read_text())
        assert not doc["finite"] and doc["last_finite_step"] == 0
        assert np.load(tmp_path / "r" / "rollout.npy").shape[0] == 1


def _linear_dataset(path, seq, shape):
    n = len(seq)
    q = np.ones((n, 4) + shape)
    q[:, 1:3] = 0.0
    q[:, 3] = seq.reshape((n,) + shape)
    write_dataset([TrajectoryRecord([], q)] * 2, NormStats.identity(), path / "val.kbub", dtype=np.float64)
    write_dataset([TrajectoryRecord([], q)], NormStats.identity(), path / "train.kbub", dtype=np.float64)


class TestDmd:
    def test_linear_map(self, tmp_path):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(8, 8))
        A *= 0.95 / np.max(np.abs(np.linalg.eigvals(A)))
        seq = [rng.normal(size=8)]
        for _ in range(49):
            seq.append(A @ seq[-1])
        (tmp_path / "d").mkdir()
        _linear_dataset(tmp_path / "d", np.array(seq), (2, 4))
        assert run("dmd", "--data", tmp_path / "d", "--out", tmp_path / "o") == 0
        spec = json.loads((tmp_path / "o" / "spectrum.json").read_text())
        got = [complex(a, b) for a, b in spec["eigenvalues"]]
        ref = list(np.linalg.eigvals(A))
        for v in got:
            j = int(np.argmin([abs(v - w) for w in ref]))
            assert abs(v - ref.pop(j)) <= 1e-8
        assert (tmp_path / "o" / "mode_000.pgm").exists() and (tmp_path / "o" / "modes.bin").exists()
        assert run("dmd", "--data", tmp_path / "d", "--out", tmp_path / "o5", "--rank", 5) == 0
        assert len(json.loads((tmp_path / "o5" / "spectrum.json").read_text())["eigenvalues"]) == 5

    def test_constant(self, tmp_path):
        (tmp_path / "d").mkdir()
        _linear_dataset(tmp_path / "d", np.tile(np.arange(1.0, 9.0), (6, 1)), (2, 4))
        assert run("dmd", "--data", tmp_path / "d", "--out", tmp_path / "o") == 0
        eig = json.loads((tmp_path / "o" / "spectrum.json").read_text())["eigenvalues"]
        assert abs(complex(*eig[0]) - 1.0) <= 1e-12

    def test_degenerate(self, tmp_path):
        (tmp_path / "d").mkdir()
        _linear_dataset(tmp_path / "d", np.zeros((4, 8)), (2, 4))
        assert run("dmd", "--data", tmp_path / "d", "--out", tmp_path / "o") == 3


class TestExport:
    def test_kbub_and_npy(self, workspace, tmp_path):
        assert run("export", "--input", workspace / "data" / "val.kbub", "--out", tmp_path, "--step", 1) == 0
        assert (tmp_path / "field.pgm").exists() and (tmp_path / "field.csv").exists()
        np.save(tmp_path / "a.npy", np.arange(12.0).reshape(3, 4))
        assert run("export", "--input", tmp_path / "a.npy", "--out", tmp_path, "--name", "a",
                   "--range", "0,11") == 0
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n4 3\n255\n")

    def test_errors(self, tmp_path):
        assert run("export", "--out", tmp_path) == 2
        assert run("export", "--input", tmp_path / "missing.npy", "--out", tmp_path) == 3
        np.save(tmp_path / "bad.npy", np.array([[0.0, np.nan]]))
        assert run("export", "--input", tmp_path / "bad.npy", "--out", tmp_path) == 3


def test_determinism_train_evaluate(workspace, tmp_path):
    for tag in ("a", "b"):
        assert run("train", "--data", workspace / "data", "--out", tmp_path / f"m{tag}", *TRAIN) == 0
        assert run("evaluate", "--data", workspace / "data", "--checkpoint", tmp_path / f"m{tag}",
                   "--out", tmp_path / f"e{tag}") == 0
    strip = lambda d: {k: v for k, v in outputs(d).items() if k != "config.json"}  # noqa: E731
    assert strip(tmp_path / "ma") == strip(tmp_path / "mb")
    assert strip(tmp_path / "ea") == strip(tmp_path / "eb")


def test_cli_entry_point_help(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--help"])
    assert info.value.code == 0
    assert "generate" in capsys.readouterr().out

#!/usr/bin/env python3
"""
Tests for the experiment configuration, checkpoints, manifests and the
command-line driver, including a miniature end-to-end sweep on synthetic IDX files.
"""

import contextlib
import io
import json
import os
import struct
import sys
import tempfile

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '.'))

import numpy as np
import pytest
import torch
from rich.console import Console

from latentfill import commands, experiment, manifest
from latentfill.checkpoint import ModelCheckpoint, load_checkpoint, save_arrays, save_checkpoint
from latentfill.errors import BadMagic, InvalidValue, ManifestMismatch, ParseError, Truncated, UnknownKey
from latentfill.evaluation import CSV_HEADER, MetricsReport, read_imputation_csv, write_metrics_csv
from latentfill.score_model import ScoreModel, ScoreNetConfig
from latentfill.sde import DiffusionSchedule


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        if isinstance(payload, str):
            f.write(payload)
        else:
            json.dump(payload, f)
    return path


def _run_cli(argv):
    """Run the CLI, returning (exit code, captured stderr)."""
    stderr = io.StringIO()
    with contextlib.redirect_stderr(stderr):
        code = commands.cli(argv)
    return code, stderr.getvalue()


def test_empty_config_gives_defaults():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = experiment.parse_config(_write_json(os.path.join(tmp, "empty.json"), ""))
    assert cfg == experiment.profile_defaults("desk")
    assert cfg.missing_rates == [0.0, 0.1, 0.3, 0.5, 0.6, 0.8]
    assert cfg.seeds == [42, 43, 44]
    assert cfg.train.lr_pixel == 1.96e-5
    assert experiment.parse_config().schedule.num_steps == 250


def test_full_profile():
    cfg = experiment.parse_config(overrides=["profile=full"])
    assert cfg.schedule.num_steps == 1000
    assert cfg.train.epochs == 50
    assert cfg.eval.num_samples == 10000
    assert cfg.pixel_net.channel_multipliers == [1, 2, 4]


def test_invalid_values_name_the_key():
    with pytest.raises(InvalidValue, match=r"missing_rates\[0\]"):
        experiment.config_from_dict({"missing_rates": [1.5]})
    with pytest.raises(InvalidValue, match="train.epochs"):
        experiment.config_from_dict({"train": {"epochs": "five"}})
    with pytest.raises(InvalidValue, match=r"models\[1\]"):
        experiment.config_from_dict({"models": ["ddpm", "vae"]})
    with pytest.raises(InvalidValue, match="seeds"):
        experiment.config_from_dict({"seeds": []})
    with pytest.raises(InvalidValue, match=r"seeds\[0\]"):
        experiment.config_from_dict({"seeds": [-1]})
    with pytest.raises(InvalidValue, match="test_seed_offset"):
        experiment.config_from_dict({"seeds": [2 ** 32 - 1]})


def test_unknown_keys_and_parse_errors():
    with pytest.raises(UnknownKey, match="train.epoch"):
        experiment.config_from_dict({"train": {"epoch": 3}})
    with tempfile.TemporaryDirectory() as tmp:
        path = _write_json(os.path.join(tmp, "bad.json"), '{\n  "seeds": [42,\n}')
        with pytest.raises(ParseError, match="line 3"):
            experiment.parse_config(path)
    with pytest.raises(ParseError):
        experiment.parse_config(overrides=["train.epochs"])


def test_overrides():
    cfg = experiment.parse_config(overrides=["train.epochs=2", "missing_rates=[0.5]", "output_dir=/tmp/run"])
    assert cfg.train.epochs == 2
    assert cfg.missing_rates == [0.5]
    assert cfg.output_dir == "/tmp/run"


def test_config_round_trip():
    """parse -> serialize -> parse gives an identical configuration."""
    with tempfile.TemporaryDirectory() as tmp:
        first = experiment.parse_config(overrides=["profile=full", "seeds=[7]", "vae.beta_kl=0.001"])
        path = os.path.join(tmp, "config.json")
        experiment.save_config(first, path)
        second = experiment.parse_config(path)
    assert second == first
    assert experiment.serialize_config(second) == experiment.serialize_config(first)


def test_checkpoint_round_trip_and_corruption():
    schedule = DiffusionSchedule(num_steps=5)
    net_config = ScoreNetConfig(base_channels=8, channel_multipliers=[1], blocks_per_resolution=1,
                                norm_groups=4, dropout=0.0, input_shape=(1, 8, 8))
    model = ScoreModel(net_config, schedule)
    ckpt = ModelCheckpoint.from_module("score", model, {"space": "pixel", "loss_trace": [1.0, 0.5]})
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "score.ckpt")
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.kind == "score"
        assert loaded.metadata == ckpt.metadata
        for name, value in ckpt.tensors.items():
            assert np.array_equal(loaded.tensors[name], value)
        restored = loaded.load_into(ScoreModel(net_config, schedule))
        for name, value in model.state_dict().items():
            assert torch.equal(restored.state_dict()[name], value)

        with open(path, "rb") as f:
            blob = f.read()
        truncated = os.path.join(tmp, "truncated.ckpt")
        with open(truncated, "wb") as f:
            f.write(blob[:-16])
        with pytest.raises(Truncated):
            load_checkpoint(truncated)
        wrong = os.path.join(tmp, "wrong.ckpt")
        with open(wrong, "wb") as f:
            f.write(b"XXXX" + blob[4:])
        with pytest.raises(BadMagic):
            load_checkpoint(wrong)


def test_manifest_verification():
    with tempfile.TemporaryDirectory() as tmp:
        output = os.path.join(tmp, "out.bin")
        with open(output, "wb") as f:
            f.write(b"artifact")
        source = os.path.join(tmp, "input.bin")
        with open(source, "wb") as f:
            f.write(b"input")
        written = manifest.write_manifest(tmp, "test-step", {"a": 1}, {"source": source}, {"out": output})
        assert manifest.verify_manifest(tmp, {"a": 1})
        assert not manifest.verify_manifest(tmp, {"a": 2})
        assert written["input_hash"] == manifest.combined_hash(
            {"source": manifest.sha256_file(source)}, {"a": 1})

        with open(output, "ab") as f:
            f.write(b"!")
        with pytest.raises(ManifestMismatch, match="has changed"):
            manifest.check_manifest(tmp)
        os.remove(output)
        assert not manifest.verify_manifest(tmp)
    with tempfile.TemporaryDirectory() as empty:
        assert not manifest.verify_manifest(empty)


def test_evaluate_shape_mismatch_exit_code():
    """Wrongly shaped samples end the run with exit 1 and a one-line error."""
    with tempfile.TemporaryDirectory() as tmp:
        samples = os.path.join(tmp, "samples.ckpt")
        save_arrays(samples, {}, images=np.zeros((4, 1, 14, 14), dtype=np.float32))
        code, stderr = _run_cli(["evaluate", "--samples", samples, "--imputations", samples,
                                 "-o", tmp, "-q"])
    assert code == 1
    last = stderr.strip().splitlines()[-1]
    assert last.startswith("error: ShapeMismatch: ")


def test_missing_checkpoint_exit_code():
    with tempfile.TemporaryDirectory() as tmp:
        code, stderr = _run_cli(["sample", "--score", os.path.join(tmp, "nope.ckpt"), "-o", tmp, "-q"])
    assert code == 1
    assert stderr.strip().splitlines()[-1].startswith("error: MissingArtifact: ")


def _tiny_pixel_checkpoint(path):
    schedule = DiffusionSchedule(num_steps=10)
    net_config = ScoreNetConfig(base_channels=8, channel_multipliers=[1, 2], blocks_per_resolution=1,
                                norm_groups=4, dropout=0.0)
    torch.manual_seed(0)
    model = ScoreModel(net_config, schedule)
    save_checkpoint(ModelCheckpoint.from_module("score", model, {
        "space": "pixel", "net_config": net_config.to_dict(), "schedule": schedule.to_dict(),
    }), path)


def test_sample_is_deterministic():
    """Two `sample` runs with the same seed write bit-identical images."""
    with tempfile.TemporaryDirectory() as tmp:
        score = os.path.join(tmp, "score.ckpt")
        _tiny_pixel_checkpoint(score)
        outputs = []
        for name in ("a.ckpt", "b.ckpt"):
            out = os.path.join(tmp, name)
            code, stderr = _run_cli(["sample", "--score", score, "--num", "5", "--steps", "6", "--seed", "42",
                                     "--out", out, "--set", "eval.batch_size=2", "-o", tmp, "-q",
                                     "--device", "cpu"])
            assert code == 0, stderr
            outputs.append(load_checkpoint(out))
        a, b = (o.tensors["images"] for o in outputs)
        assert a.shape == (5, 1, 28, 28)
        assert np.array_equal(a, b)
        assert outputs[0].metadata["seed"] == 42
        assert os.path.exists(os.path.join(tmp, "a.png"))


def test_export_plots():
    """Per-figure CSVs aggregate seeds into mean and standard deviation."""
    with tempfile.TemporaryDirectory() as tmp:
        cfg = experiment.parse_config(overrides=[f"output_dir={tmp}"])
        reports = [
            MetricsReport("ddpm", 0.5, 0.5, seed, fid, 8.0, 0.02, 0.04, 1.0)
            for seed, fid in ((42, 2.0), (43, 4.0))
        ]
        write_metrics_csv(reports, os.path.join(tmp, "metrics.csv"))
        quality, imputation = commands.step_export_plots(commands.Session(cfg))
        with open(quality) as f:
            lines = f.read().splitlines()
        assert lines[0].startswith("model,train_mr,fid_mean")
        fields = lines[1].split(",")
        assert fields[0] == "ddpm"
        assert float(fields[2]) == 3.0
        assert abs(float(fields[3]) - 2 ** 0.5) < 1e-12
        assert fields[-1] == "2"
        assert os.path.exists(imputation)


def _write_idx(directory, prefix, count, seed):
    """Synthetic MNIST-format files: one bright bar per image."""
    rng = np.random.default_rng(seed)
    pixels = np.zeros((count, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, size=count).astype(np.uint8)
    for i, label in enumerate(labels):
        pixels[i, 2 + 2 * label:5 + 2 * label, 4:24] = 255
    with open(os.path.join(directory, f"{prefix}-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 2051, count, 28, 28) + pixels.tobytes())
    with open(os.path.join(directory, f"{prefix}-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 2049, count) + labels.tobytes())


def _tiny_sweep_config(tmp):
    mnist_dir = os.path.join(tmp, "mnist")
    os.makedirs(mnist_dir)
    _write_idx(mnist_dir, "train", 48, seed=0)
    _write_idx(mnist_dir, "t10k", 24, seed=1)
    small_net = {"base_channels": 8, "norm_groups": 4, "channel_multipliers": [1, 2],
                 "blocks_per_resolution": 1, "attention_resolutions": []}
    return _write_json(os.path.join(tmp, "sweep.json"), {
        "output_dir": os.path.join(tmp, "runs"),
        "missing_rates": [0.0, 0.5],
        "seeds": [42],
        "models": ["ddpm", "ldm", "em"],
        "data": {"mnist_dir": mnist_dir},
        "schedule": {"num_steps": 3},
        "train": {"batch_size": 16, "epochs": 1, "vae_epochs": 1, "classifier_epochs": 1,
                  "em_rounds": 1, "em_epochs_per_round": 1},
        "pixel_net": small_net,
        "latent_net": {**small_net, "attention_resolutions": [7]},
        "vae": {"base_channels": 8, "norm_groups": 4},
        "impute": {"num_images": 6, "batch_size": 4, "save_grid": False},
        "eval": {"num_samples": 6, "batch_size": 4},
    })


def test_tiny_sweep_is_complete_and_resumable():
    """Every (rate, seed, model) cell lands in the CSV; a rerun skips verified cells."""
    with tempfile.TemporaryDirectory() as tmp:
        cfg = experiment.parse_config(_tiny_sweep_config(tmp))
        session = commands.Session(cfg, device="cpu")
        reports = commands.step_sweep(session)
        assert len(reports) == 2 * 1 * 3
        with open(session.layout.metrics_csv) as f:
            lines = f.read().splitlines()
        assert lines[0] == ",".join(CSV_HEADER)
        assert len(lines) == 7
        assert {(r.model_id, r.train_missing_rate) for r in reports} == {
            (m, r) for m in ("ddpm", "ldm", "em") for r in (0.0, 0.5)
        }
        for report in reports:
            assert report.fid >= 0
            assert 1.0 <= report.is_score <= 10.0
            assert report.mse_missing is not None

        log = io.StringIO()
        rerun = commands.Session(cfg, Console(file=log, width=200), device="cpu")
        again = commands.step_sweep(rerun)
        assert log.getvalue().count("Skipping") == 6
        assert [r.fid for r in again] == [r.fid for r in reports]

        config_path = os.path.join(tmp, "sweep.json")
        code, stderr = _run_cli(["export-plots", "-c", config_path, "-q"])
        assert code == 0, stderr
        assert os.path.exists(os.path.join(cfg.output_dir, "plots", "fig_imputation.csv"))


def test_sweep_compares_imputation_methods():
    """Each cell also imputes with its baselines; the per-method table feeds the imputation plot data."""
    with tempfile.TemporaryDirectory() as tmp:
        cfg = experiment.parse_config(_tiny_sweep_config(tmp), overrides=["missing_rates=[0.5]"])
        session = commands.Session(cfg, device="cpu")
        reports = commands.step_sweep(session)
        assert {r.model_id: r.method for r in reports} == {
            "ddpm": "guidance_pixel", "ldm": "guidance_latent", "em": "em"}

        rows = read_imputation_csv(session.layout.imputation_csv)
        assert sorted((r.model_id, r.method) for r in rows) == [
            ("ddpm", "guidance_pixel"), ("ddpm", "replacement"), ("em", "em"),
            ("ldm", "autoencoder"), ("ldm", "guidance_latent")]
        for row in rows:
            assert row.train_missing_rate == 0.5
            assert row.mse_all >= 0 and row.mse_missing is not None
        # The default method's row repeats the cell's metrics
        by_model = {r.model_id: r for r in reports}
        for row in rows:
            if row.method == by_model[row.model_id].method:
                assert row.mse_all == by_model[row.model_id].mse_all
        assert os.path.exists(session.layout.cell("ddpm", 0.5, 42).baseline_imputations("replacement"))

        _, imputation = commands.step_export_plots(session)
        with open(imputation) as f:
            lines = f.read().splitlines()
        assert lines[0].startswith("model,method,train_mr,mse_all_mean")
        assert len(lines) == 1 + 5
        assert {tuple(line.split(",")[:2]) for line in lines[1:]} >= {("ddpm", "replacement"),
                                                                       ("ldm", "autoencoder")}


def test_worker_count_does_not_change_results():
    """Cells run on two workers train and evaluate exactly as they do one at a time."""
    results = []
    for workers in (1, 2):
        with tempfile.TemporaryDirectory() as tmp:
            cfg = experiment.parse_config(_tiny_sweep_config(tmp), overrides=[f"workers={workers}"])
            session = commands.Session(cfg, device="cpu")
            reports = commands.step_sweep(session)
            weights = {}
            for report in reports:
                cell = session.layout.cell(report.model_id, report.train_missing_rate, report.seed)
                weights[(report.model_id, report.train_missing_rate)] = load_checkpoint(cell.score).tensors
            imputation = {(r.model_id, r.method, r.train_missing_rate): r.mse_all
                          for r in read_imputation_csv(session.layout.imputation_csv)}
            results.append(({(r.model_id, r.train_missing_rate): (r.fid, r.is_score, r.mse_all) for r in reports},
                            imputation, weights))

    (metrics_1, imputation_1, weights_1), (metrics_2, imputation_2, weights_2) = results
    assert metrics_1 == metrics_2
    assert imputation_1 == imputation_2
    for key, tensors in weights_1.items():
        for name, value in tensors.items():
            assert np.array_equal(weights_2[key][name], value), f"{key} {name}"


if __name__ == "__main__":
    print("Testing configuration...")
    test_empty_config_gives_defaults()
    test_full_profile()
    test_invalid_values_name_the_key()
    test_unknown_keys_and_parse_errors()
    test_overrides()
    test_config_round_trip()
    print("Testing checkpoints and manifests...")
    test_checkpoint_round_trip_and_corruption()
    test_manifest_verification()
    print("Testing the command line...")
    test_evaluate_shape_mismatch_exit_code()
    test_missing_checkpoint_exit_code()
    test_sample_is_deterministic()
    test_export_plots()
    test_tiny_sweep_is_complete_and_resumable()
    test_sweep_compares_imputation_methods()
    test_worker_count_does_not_change_results()
    print("✅ All CLI tests passed")

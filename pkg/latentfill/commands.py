"""
Command-line driver: data preparation, training, sampling, imputation,
evaluation, the resumable sweep and plot-data export.
"""

import argparse
import csv
import json
import logging
import os
import sys
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch
from rich.console import Console

from . import __version__, config
from .artifacts import CellPaths, OutputLayout, grid_path
from .checkpoint import ModelCheckpoint, load_checkpoint, save_arrays, save_checkpoint
from .data import DatasetSplit, ImageBatch, MaskSet, load_idx, load_masks, mcar_mask, mnist_paths, save_masks
from .errors import LatentFillError, MissingArtifact, ShapeMismatch
from .evaluation import (ImputationReport, MetricsReport, classifier_outputs, feature_stats, frechet_distance,
                         imputation_mse, inception_score, load_classifier, read_imputation_csv, read_imputation_json,
                         read_metrics_csv, stats_from_features, train_classifier, write_imputation_csv,
                         write_imputation_json, write_metrics_csv, write_metrics_json)
from .experiment import ExperimentConfig, parse_config, save_config
from .imputer_manager import ImputerManager, method_for_model, methods_for_model
from .imputers.base import ImputationRequest, ImputationResult
from .impute import batch_seed, em_impute_train, save_image_grid
from .manifest import verify_manifest, write_manifest
from .score_model import TrainConfig, load_score_model, train_latent_score, train_score
from .sde import sample_unconditional
from .vae import IMAGE_SHAPE, decode, load_vae, train_vae

logger = logging.getLogger(__name__)

def setup_logging():
    """Set up file-based logging for the application."""
    os.makedirs(config.LOG_DIR, exist_ok=True)
    log_file = os.path.join(config.LOG_DIR, "latentfill.log")
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(name)s - %(message)s',
        filename=log_file,
        filemode='a',
        force=True,
    )
    logging.info("latentfill starting")


class Session:
    """Configuration, output layout and data shared by the steps of one invocation."""

    def __init__(self, cfg: ExperimentConfig, console: Console | None = None, device: str | None = None):
        self.cfg = cfg
        self.console = console
        self.device = device
        self.layout = OutputLayout(cfg.output_dir)
        self._lock = threading.RLock()
        self._images = {}
        self._reference = None
        self._classifier = None

    def say(self, message: str):
        if self.console is not None:
            self.console.print(message)

    def images(self, role: str) -> ImageBatch:
        """MNIST images of a role, truncated to the configured limit; loaded once."""
        with self._lock:
            if role not in self._images:
                mnist_dir = self.cfg.data.mnist_dir
                if not mnist_dir:
                    raise MissingArtifact("data.mnist_dir: no MNIST directory configured (LATENTFILL_MNIST_DIR)")
                images_path, labels_path = mnist_paths(mnist_dir, role)
                for path in (images_path, labels_path):
                    if not os.path.exists(path):
                        raise MissingArtifact(f"data.mnist_dir: {path} does not exist")
                batch = load_idx(images_path, labels_path)
                limit = self.cfg.data.train_limit if role == "train" else self.cfg.data.test_limit
                self._images[role] = batch.subset(slice(0, limit)) if limit else batch
            return self._images[role]

    def mnist_files(self, role: str) -> dict[str, str]:
        images_path, labels_path = mnist_paths(self.cfg.data.mnist_dir, role)
        return {f"{role}_images": images_path, f"{role}_labels": labels_path}

    def split(self, role: str, rate: float, seed: int) -> tuple[DatasetSplit, str]:
        """Images with persistent masks; the mask file is created on first use."""
        images = self.images(role)
        if role == "test":
            rate, seed = self.cfg.impute.test_missing_rate, seed + self.cfg.impute.test_seed_offset
        path = self.layout.masks(role, rate, seed)
        with self._lock:
            masks = None
            if os.path.exists(path):
                masks = load_masks(path, images.image_shape)
                if len(masks) != len(images) or masks.seed != seed:
                    logger.warning(f"Mask file {path} does not match the data, regenerating")
                    masks = None
            if masks is None:
                masks = mcar_mask(len(images), images.image_shape, rate, seed)
                self.layout.ensure(self.layout.data_dir)
                save_masks(masks, path)
        return DatasetSplit(images, MaskSet(masks.masks, rate, seed), role), path

    def classifier(self):
        with self._lock:
            if self._classifier is None:
                path = self.cfg.data.classifier_path or self.layout.classifier
                self._classifier = load_classifier(_load(path, "classifier"), self.device)
            return self._classifier

    def classifier_path(self) -> str:
        return self.cfg.data.classifier_path or self.layout.classifier

    def reference_stats(self):
        """Feature statistics of the complete test images."""
        model = self.classifier()
        with self._lock:
            if self._reference is None:
                self._reference = feature_stats(model, self.images("test"))
            return self._reference


def _load(path: str, what: str) -> ModelCheckpoint:
    if not path or not os.path.exists(path):
        raise MissingArtifact(f"{what} checkpoint {path} does not exist")
    return load_checkpoint(path)


def _train_config(session: Session, rate: float, seed: int, lr: float, epochs: int) -> TrainConfig:
    return TrainConfig(batch_size=session.cfg.train.batch_size, epochs=epochs, learning_rate=lr,
                       seed=seed, missing_rate=rate)


def _cell_snapshot(cfg: ExperimentConfig, model: str, rate: float, seed: int) -> dict:
    snapshot = cfg.to_dict()
    for key in ("output_dir", "workers", "missing_rates", "seeds", "models"):
        snapshot.pop(key)
    snapshot.update({"model": model, "train_missing_rate": rate, "seed": seed})
    return snapshot


# Steps. Each writes its artifact and returns what later steps need.

def step_prepare_data(session: Session, rates: list[float], seeds: list[int]) -> dict[str, str]:
    outputs = {}
    for seed in seeds:
        for rate in rates:
            split, path = session.split("train", rate, seed)
            outputs[os.path.basename(path)] = path
            session.say(f"[green]train masks[/green] rate={rate} seed={seed}: "
                        f"observed {split.masks.observed_fraction():.3f}")
        _, path = session.split("test", session.cfg.impute.test_missing_rate, seed)
        outputs[os.path.basename(path)] = path
    inputs = {**session.mnist_files("train"), **session.mnist_files("test")}
    write_manifest(session.layout.data_dir, "prepare-data", session.cfg.to_dict(), inputs, outputs)
    return outputs


def step_train_classifier(session: Session, out: str | None = None) -> str:
    cfg = session.cfg
    out = out or session.layout.classifier
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    session.say("[bold cyan]Training evaluation classifier[/bold cyan]")
    ckpt = train_classifier(session.images("train"), epochs=cfg.train.classifier_epochs,
                            learning_rate=cfg.train.lr_classifier, batch_size=cfg.train.batch_size,
                            seed=cfg.eval.classifier_seed, device=session.device, console=session.console)
    save_checkpoint(ckpt, out)
    test = session.images("test")
    probs, _ = classifier_outputs(load_classifier(ckpt, session.device), test)
    acc = float((probs.argmax(axis=1) == test.labels).mean())
    session.say(f"[green]Classifier test accuracy: {acc:.4f}[/green]")
    write_manifest(os.path.dirname(os.path.abspath(out)), "train-classifier", cfg.to_dict(),
                   session.mnist_files("train"), {"classifier": out}, {"test_accuracy": acc})
    return out


def step_train_vae(session: Session, rate: float, seed: int, out: str | None = None) -> str:
    cfg = session.cfg
    out = out or session.layout.cell("ldm", rate, seed).vae
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    split, _ = session.split("train", rate, seed)
    session.say(f"[bold cyan]Training VAE[/bold cyan] rate={rate} seed={seed}")
    ckpt = train_vae(_train_config(session, rate, seed, cfg.train.lr_vae, cfg.train.vae_epochs), cfg.vae, split,
                     session.device, session.console)
    save_checkpoint(ckpt, out)
    return out


def step_train_score(session: Session, model: str, rate: float, seed: int, vae_path: str | None = None,
                     out: str | None = None) -> str:
    cfg = session.cfg
    cell = session.layout.cell(model, rate, seed)
    out = out or cell.score
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    split, _ = session.split("train", rate, seed)
    session.say(f"[bold cyan]Training {model} score model[/bold cyan] rate={rate} seed={seed}")
    if model == "ldm":
        vae_ckpt = _load(vae_path or cell.vae, "VAE")
        ckpt = train_latent_score(_train_config(session, rate, seed, cfg.train.lr_latent, cfg.train.epochs),
                                  cfg.latent_net, vae_ckpt, split, cfg.schedule, session.device, session.console)
    else:
        ckpt = train_score(_train_config(session, rate, seed, cfg.train.lr_pixel, cfg.train.epochs),
                           cfg.pixel_net, split, cfg.train.loss_kind, cfg.schedule,
                           device=session.device, console=session.console)
    save_checkpoint(ckpt, out)
    return out


def step_train_em(session: Session, rate: float, seed: int, init_path: str | None = None,
                  out: str | None = None) -> str:
    cfg = session.cfg
    out = out or session.layout.cell("em", rate, seed).score
    if init_path:
        initial = _load(init_path, "initial score")
    else:
        initial_path = os.path.join(os.path.dirname(os.path.abspath(out)), "score_initial.ckpt")
        step_train_score(session, "em", rate, seed, out=initial_path)
        initial = load_checkpoint(initial_path)
    split, _ = session.split("train", rate, seed)
    session.say(f"[bold cyan]EM retraining[/bold cyan] rounds={cfg.train.em_rounds} rate={rate} seed={seed}")
    ckpt, _ = em_impute_train(initial, split, cfg.train.em_rounds, steps=cfg.schedule.num_steps, seed=seed,
                              epochs_per_round=cfg.train.em_epochs_per_round,
                              batch_size=cfg.impute.batch_size, device=session.device,
                              console=session.console)
    save_checkpoint(ckpt, out)
    return out


def generate_samples(score_ckpt: ModelCheckpoint, vae_ckpt: ModelCheckpoint | None, num: int, steps: int,
                     seed: int, batch_size: int, device=None) -> ImageBatch:
    """Unconditional samples in pixel space; latent models are decoded."""
    model = load_score_model(score_ckpt, device)
    device = next(model.parameters()).device
    latent = score_ckpt.metadata.get("space") == "latent"
    if latent:
        if vae_ckpt is None:
            raise MissingArtifact("latent score model needs its VAE checkpoint to decode samples")
        vae_model = load_vae(vae_ckpt, device)
        scale = float(vae_ckpt.metadata["latent_scale"])
    out = []
    for index, start in enumerate(range(0, num, batch_size)):
        count = min(batch_size, num - start)
        x = sample_unconditional(model, (count, *model.net_config.input_shape), model.schedule,
                                 batch_seed(seed, index), steps, denoise_final=True, device=device)
        if latent:
            with torch.no_grad():
                x = decode(vae_model, x / scale)
        out.append(np.clip(x.cpu().numpy(), 0.0, 1.0).astype(np.float32))
    return ImageBatch(np.concatenate(out) if out else np.empty((0, *IMAGE_SHAPE), dtype=np.float32))


def step_sample(session: Session, model: str, rate: float, seed: int, score_path: str | None = None,
                vae_path: str | None = None, num: int | None = None, steps: int | None = None,
                out: str | None = None) -> str:
    cfg = session.cfg
    cell = session.layout.cell(model, rate, seed)
    out = out or cell.samples
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    score_ckpt = _load(score_path or cell.score, "score")
    vae_ckpt = _load(vae_path or cell.vae, "VAE") if score_ckpt.metadata.get("space") == "latent" else None
    num = num or cfg.eval.num_samples
    steps = steps or cfg.schedule.num_steps
    session.say(f"[bold cyan]Sampling[/bold cyan] {num} images from {model} ({steps} steps)")
    images = generate_samples(score_ckpt, vae_ckpt, num, steps, seed, cfg.eval.batch_size, session.device)
    save_arrays(out, {"model": model, "seed": seed, "steps": steps, "train_missing_rate": rate},
                images=images.data)
    if cfg.impute.save_grid:
        save_image_grid(images, grid_path(out))
    return out


def run_imputation(session: Session, method: str, request: ImputationRequest,
                   score_ckpt, vae_ckpt) -> ImputationResult:
    """Impute in batches; batch b uses its own seed derived from the request seed."""
    imputer = ImputerManager().create_imputer(method, session.console, session.device)
    batch_size = session.cfg.impute.batch_size
    parts, wall_time = [], 0.0
    for index, start in enumerate(range(0, len(request), batch_size)):
        rows = slice(start, start + batch_size)
        part = request.subset(rows)
        part.seed = batch_seed(request.seed, index)
        result = imputer.impute(part, score_ckpt, vae_ckpt)
        parts.append(result.x_imputed.data)
        wall_time += result.wall_time
    images = ImageBatch(np.concatenate(parts), request.x_obs.labels)
    return ImputationResult(images, method, request.seed, wall_time)


def step_impute(session: Session, model: str, rate: float, seed: int, method: str | None = None,
                score_path: str | None = None, vae_path: str | None = None, num: int | None = None,
                steps: int | None = None, out: str | None = None) -> str:
    cfg = session.cfg
    cell = session.layout.cell(model, rate, seed)
    out = out or cell.imputations
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    method = method or method_for_model(model)
    score_ckpt = _load(score_path or cell.score, "score") if method != "autoencoder" else None
    needs_vae = method in ("guidance_latent", "autoencoder")
    vae_ckpt = _load(vae_path or cell.vae, "VAE") if needs_vae else None
    test, _ = session.split("test", cfg.impute.test_missing_rate, seed)
    num = min(num or cfg.impute.num_images, len(test))
    test = DatasetSplit(test.images.subset(slice(0, num)), test.masks.subset(slice(0, num)), "test")
    request = ImputationRequest(test.images, test.masks, steps or cfg.schedule.num_steps, seed, method)
    session.say(f"[bold cyan]Imputing[/bold cyan] {num} test images with {method}")
    result = run_imputation(session, method, request, score_ckpt, vae_ckpt)
    save_arrays(out, {"model": model, "method": method, "seed": seed, "steps": request.steps,
                      "train_missing_rate": rate, "test_missing_rate": cfg.impute.test_missing_rate,
                      "wall_time_s": result.wall_time},
                imputed=result.x_imputed.data, mask=test.masks.masks.astype(np.float32))
    if cfg.impute.save_grid:
        save_image_grid(result.x_imputed, grid_path(out))
    return out


def _check_images(array: np.ndarray, what: str) -> ImageBatch:
    if array.ndim != 4 or tuple(array.shape[1:]) != IMAGE_SHAPE:
        raise ShapeMismatch(f"{what}: expected [N, 1, 28, 28] images, got {tuple(array.shape)}")
    return ImageBatch(array)


def _load_imputations(session: Session, path: str) -> tuple[ModelCheckpoint, ImageBatch, float, float | None]:
    """Stored imputations, checked against the test images; returns them with (mse_all, mse_missing)."""
    stored = _load(path, "imputations")
    imputed = _check_images(stored.tensors["imputed"], "imputations")
    test = session.images("test")
    if len(imputed) > len(test):
        raise ShapeMismatch(f"{len(imputed)} imputations for {len(test)} test images")
    mask = stored.tensors["mask"]
    if mask.shape != imputed.data.shape:
        raise ShapeMismatch(f"imputation mask {mask.shape} vs images {imputed.data.shape}")
    mse_all, mse_missing = imputation_mse(test.data[:len(imputed)], imputed.data, mask)
    return stored, imputed, mse_all, mse_missing


def step_evaluate_imputation(session: Session, model: str, rate: float, seed: int,
                             imputations_path: str) -> ImputationReport:
    stored, _, mse_all, mse_missing = _load_imputations(session, imputations_path)
    return ImputationReport(
        model_id=model, method=stored.metadata.get("method", method_for_model(model)), train_missing_rate=rate,
        test_missing_rate=session.cfg.impute.test_missing_rate, seed=seed, mse_all=mse_all,
        mse_missing=mse_missing, wall_time_s=float(stored.metadata.get("wall_time_s", 0.0)),
    )


def step_evaluate(session: Session, model: str, rate: float, seed: int, samples_path: str | None = None,
                  imputations_path: str | None = None, out: str | None = None) -> MetricsReport:
    cfg = session.cfg
    cell = session.layout.cell(model, rate, seed)
    samples = _check_images(_load(samples_path or cell.samples, "samples").tensors["images"], "samples")
    stored, imputed, mse_all, mse_missing = _load_imputations(session, imputations_path or cell.imputations)
    classifier = session.classifier()

    reference = session.reference_stats()
    probs, feats = classifier_outputs(classifier, samples)
    fid = frechet_distance(stats_from_features(feats), reference)
    is_score = inception_score(probs)
    probs_imp, feats_imp = classifier_outputs(classifier, imputed)
    report = MetricsReport(
        model_id=model, train_missing_rate=rate, test_missing_rate=cfg.impute.test_missing_rate, seed=seed,
        fid=fid, is_score=is_score, mse_all=mse_all, mse_missing=mse_missing,
        wall_time_s=float(stored.metadata.get("wall_time_s", 0.0)),
        fid_imputed=frechet_distance(stats_from_features(feats_imp), reference) if len(imputed) > 1 else None,
        is_imputed=inception_score(probs_imp),
        method=stored.metadata.get("method"),
    )
    write_metrics_json([report], out or cell.metrics)
    session.say(f"[green]{model} rate={rate} seed={seed}: FID {fid:.3f}, IS {is_score:.3f}, "
                f"MSE {mse_all:.5f}[/green]")
    return report


def run_cell(session: Session, model: str, rate: float, seed: int) -> MetricsReport:
    """Train, sample, impute and evaluate one cell, unless its manifest already verifies."""
    cell = session.layout.cell(model, rate, seed)
    snapshot = _cell_snapshot(session.cfg, model, rate, seed)
    if (verify_manifest(cell.directory, snapshot) and os.path.exists(cell.metrics)
            and os.path.exists(cell.imputation_metrics)):
        session.say(f"[dim]Skipping {model} rate={rate} seed={seed}: manifest verifies[/dim]")
        return _read_cell_report(cell)
    session.layout.ensure(cell.directory)
    _, train_masks = session.split("train", rate, seed)
    _, test_masks = session.split("test", session.cfg.impute.test_missing_rate, seed)
    outputs = {}
    if model == "ldm":
        outputs["vae"] = step_train_vae(session, rate, seed)
    if model == "em":
        outputs["score"] = step_train_em(session, rate, seed)
    else:
        outputs["score"] = step_train_score(session, model, rate, seed)
    outputs["samples"] = step_sample(session, model, rate, seed)
    default, *baselines = methods_for_model(model)
    outputs["imputations"] = step_impute(session, model, rate, seed, method=default)
    report = step_evaluate(session, model, rate, seed)
    outputs["metrics"] = cell.metrics
    imputation_reports = [ImputationReport(model, default, rate, report.test_missing_rate, seed, report.mse_all,
                                           report.mse_missing, report.wall_time_s)]
    for method in baselines:
        path = step_impute(session, model, rate, seed, method=method, out=cell.baseline_imputations(method))
        outputs[f"imputations_{method}"] = path
        imputation_reports.append(step_evaluate_imputation(session, model, rate, seed, path))
    write_imputation_json(imputation_reports, cell.imputation_metrics)
    outputs["imputation_metrics"] = cell.imputation_metrics
    inputs = {**session.mnist_files("train"), **session.mnist_files("test"), "train_masks": train_masks,
              "test_masks": test_masks, "classifier": session.classifier_path()}
    write_manifest(cell.directory, "sweep-cell", snapshot, inputs, outputs)
    return _read_cell_report(cell)


def _read_cell_report(cell: CellPaths) -> MetricsReport:
    with open(cell.metrics, "r", encoding="utf-8") as f:
        row = json.load(f)["rows"][0]
    return MetricsReport(**row)


def step_sweep(session: Session) -> list[MetricsReport]:
    """
    Every (rate, seed, model) cell, then the aggregated metrics CSV and JSON.

    Cells run on a bounded worker pool; finished cells are skipped on rerun.
    """
    cfg = session.cfg
    root = session.layout.ensure(session.layout.root)
    save_config(cfg, session.layout.config_snapshot)
    if not (cfg.data.classifier_path or verify_manifest(session.layout.classifier_dir)):
        step_train_classifier(session)
    step_prepare_data(session, cfg.missing_rates, cfg.seeds)
    cells = [(model, rate, seed) for rate in cfg.missing_rates for seed in cfg.seeds for model in cfg.models]
    session.say(f"[bold cyan]Sweep: {len(cells)} cells, {cfg.workers} worker(s), output {root}[/bold cyan]")
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        reports = list(pool.map(lambda cell: run_cell(session, *cell), cells))
    if os.path.exists(session.layout.metrics_csv):
        os.remove(session.layout.metrics_csv)
    write_metrics_csv(reports, session.layout.metrics_csv)
    write_metrics_json(reports, session.layout.metrics_json)
    imputation_reports = [row for cell in cells
                          for row in read_imputation_json(session.layout.cell(*cell).imputation_metrics)]
    write_imputation_csv(imputation_reports, session.layout.imputation_csv)
    session.say(f"[green]Wrote {len(reports)} rows to {session.layout.metrics_csv} and "
                f"{len(imputation_reports)} to {session.layout.imputation_csv}[/green]")
    return reports


def _mean_std(values: list[float]) -> tuple[float, float]:
    array = np.asarray(values, dtype=np.float64)
    if array.size == 0:
        return float("nan"), float("nan")
    return float(array.mean()), float(array.std(ddof=1)) if array.size > 1 else 0.0


def step_export_plots(session: Session, metrics_path: str | None = None) -> tuple[str, str]:
    """
    Per-figure CSVs: sample quality and imputation error against the training missing rate.

    Imputation rows come from the per-method table next to the metrics CSV when
    the sweep wrote one, otherwise from each cell's default method.
    """
    metrics_path = metrics_path or session.layout.metrics_csv
    reports = read_metrics_csv(metrics_path)
    groups = {}
    for report in reports:
        groups.setdefault((report.model_id, report.train_missing_rate), []).append(report)
    imputation_csv = os.path.join(os.path.dirname(os.path.abspath(metrics_path)),
                                  os.path.basename(session.layout.imputation_csv))
    if os.path.exists(imputation_csv):
        imputation_rows = read_imputation_csv(imputation_csv)
    else:
        imputation_rows = [ImputationReport(r.model_id, method_for_model(r.model_id), r.train_missing_rate,
                                            r.test_missing_rate, r.seed, r.mse_all, r.mse_missing, r.wall_time_s)
                           for r in reports]
    imputation_groups = {}
    for row in imputation_rows:
        imputation_groups.setdefault((row.model_id, row.method, row.train_missing_rate), []).append(row)
    plots_dir = session.layout.ensure(session.layout.plots_dir)
    quality_path = os.path.join(plots_dir, "fig_sample_quality.csv")
    imputation_path = os.path.join(plots_dir, "fig_imputation.csv")
    with open(quality_path, "w", newline="") as fq, open(imputation_path, "w", newline="") as fi:
        quality, imputation = csv.writer(fq), csv.writer(fi)
        quality.writerow(["model", "train_mr", "fid_mean", "fid_std", "is_mean", "is_std", "n_seeds"])
        imputation.writerow(["model", "method", "train_mr", "mse_all_mean", "mse_all_std", "mse_missing_mean",
                             "mse_missing_std", "n_seeds"])
        for (model, rate), rows in sorted(groups.items()):
            quality.writerow([model, rate, *_mean_std([r.fid for r in rows]),
                              *_mean_std([r.is_score for r in rows]), len(rows)])
        for (model, method, rate), rows in sorted(imputation_groups.items()):
            missing = [r.mse_missing for r in rows if r.mse_missing is not None]
            imputation.writerow([model, method, rate, *_mean_std([r.mse_all for r in rows]), *_mean_std(missing),
                                 len(rows)])
    session.say(f"[green]Wrote {quality_path} and {imputation_path}[/green]")
    return quality_path, imputation_path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentfill",
        description="Diffusion models trained on incomplete MNIST: pixel vs latent space",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="Experiment configuration (JSON)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a configuration key, e.g. train.epochs=1")
    common.add_argument("--profile", choices=["desk", "full"], help="Default table (desk or full scale)")
    common.add_argument("-o", "--output-dir", help="Output root (default: LATENTFILL_OUTPUT_ROOT or user data dir)")
    common.add_argument("--device", help="Torch device, e.g. cpu or cuda")
    common.add_argument("-q", "--quiet", action="store_true", help="No console progress output")

    cell = argparse.ArgumentParser(add_help=False)
    cell.add_argument("--rate", type=float, default=0.0, help="Training missing rate")
    cell.add_argument("--seed", type=int, default=config.SEEDS[0], help="Seed")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("prepare-data", parents=[common], help="Load MNIST and write persistent masks")
    p.add_argument("--rate", type=float, action="append", help="Missing rate (repeatable; default: all)")
    p.add_argument("--seed", type=int, action="append", help="Seed (repeatable; default: all)")

    p = sub.add_parser("train-vae", parents=[common, cell], help="Train the VAE on incomplete data")
    p.add_argument("--out", help="Checkpoint path")

    p = sub.add_parser("train-score", parents=[common, cell], help="Train a pixel or latent score model")
    p.add_argument("--model", choices=["ddpm", "ldm"], default="ddpm")
    p.add_argument("--vae", help="VAE checkpoint (latent model)")
    p.add_argument("--out", help="Checkpoint path")

    p = sub.add_parser("train-em", parents=[common, cell], help="EM retraining of a pixel score model")
    p.add_argument("--init", help="Initial score checkpoint (default: train one)")
    p.add_argument("--out", help="Checkpoint path")

    p = sub.add_parser("train-classifier", parents=[common], help="Train the evaluation classifier")
    p.add_argument("--out", help="Checkpoint path")

    for name, text in (("sample", "Draw unconditional samples"), ("impute", "Impute missing test pixels")):
        p = sub.add_parser(name, parents=[common, cell], help=text)
        p.add_argument("--model", choices=config.MODELS, default="ddpm")
        p.add_argument("--score", help="Score checkpoint")
        p.add_argument("--vae", help="VAE checkpoint")
        p.add_argument("--num", type=int, help="Number of images")
        p.add_argument("--steps", type=int, help="Reverse diffusion steps")
        p.add_argument("--out", help="Output arrays path")
        if name == "impute":
            p.add_argument("--method", choices=ImputerManager().get_available_methods(),
                           help="Imputation method (default depends on the model)")

    p = sub.add_parser("evaluate", parents=[common, cell], help="FID, IS and imputation MSE for one cell")
    p.add_argument("--model", choices=config.MODELS, default="ddpm")
    p.add_argument("--samples", help="Samples arrays")
    p.add_argument("--imputations", help="Imputation arrays")
    p.add_argument("--out", help="Metrics JSON path")

    sub.add_parser("sweep", parents=[common], help="Run the full rate x seed x model grid (resumable)")

    p = sub.add_parser("export-plots", parents=[common], help="Write per-figure CSV data")
    p.add_argument("--metrics", help="Metrics CSV (default: the sweep's)")
    return parser


def run(args: argparse.Namespace) -> int:
    overrides = list(args.overrides)
    if args.profile:
        overrides.insert(0, f"profile={args.profile}")
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    cfg = parse_config(args.config, overrides)
    console = None if args.quiet else Console(stderr=True)
    session = Session(cfg, console, args.device)
    logging.info(f"Running {args.command} with profile={cfg.profile}, output={cfg.output_dir}")

    command = args.command
    if command == "prepare-data":
        step_prepare_data(session, args.rate or cfg.missing_rates, args.seed or cfg.seeds)
    elif command == "train-classifier":
        step_train_classifier(session, args.out)
    elif command == "train-vae":
        step_train_vae(session, args.rate, args.seed, args.out)
    elif command == "train-score":
        step_train_score(session, args.model, args.rate, args.seed, args.vae, args.out)
    elif command == "train-em":
        step_train_em(session, args.rate, args.seed, args.init, args.out)
    elif command == "sample":
        step_sample(session, args.model, args.rate, args.seed, args.score, args.vae, args.num, args.steps, args.out)
    elif command == "impute":
        step_impute(session, args.model, args.rate, args.seed, args.method, args.score, args.vae, args.num,
                    args.steps, args.out)
    elif command == "evaluate":
        step_evaluate(session, args.model, args.rate, args.seed, args.samples, args.imputations, args.out)
    elif command == "sweep":
        step_sweep(session)
    elif command == "export-plots":
        step_export_plots(session, args.metrics)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    return run(args)


def cli(argv: list[str] | None = None) -> int:
    """
    Entry point. Failures end with one line on stderr: `error: <ErrorName>: <message>`.

    Returns:
        int: 0 on success, 1 for latentfill errors, 2 for anything unexpected
    """
    try:
        return main(argv)
    except KeyboardInterrupt:
        return 130
    except LatentFillError as e:
        logging.error(f"{type(e).__name__}: {e}")
        print(f"error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 1
    except Exception as e:
        logging.critical(f"Fatal error: {e}", exc_info=True)
        print(f"error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 2


def _one_line(error: Exception) -> str:
    return " ".join(str(error).split())

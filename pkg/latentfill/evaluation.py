"""
Evaluation: the MNIST classifier, classifier-feature FID, Inception Score and
imputation MSE, plus the metrics CSV/JSON files.
"""

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, asdict, fields

import numpy as np
import torch
import torch.nn.functional as F
from rich.console import Console
from scipy import linalg, special

from . import config
from .checkpoint import ModelCheckpoint
from .data import ImageBatch
from .errors import (DimensionMismatch, EmptyDataset, InvalidValue, NonPSD, NotNormalized, ShapeMismatch,
                     TooFewSamples)
from .networks import Classifier
from .training import fit, resolve_device, seeded_global_rng

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-6
# Relative excursion past [1, K] still put down to rounding
IS_BOUND_SLACK = 1e-6
CSV_HEADER = ["model_id", "train_mr", "test_mr", "seed", "fid", "is", "mse_all", "mse_missing", "wall_time_s"]
IMPUTATION_CSV_HEADER = ["model_id", "method", "train_mr", "test_mr", "seed", "mse_all", "mse_missing", "wall_time_s"]


@dataclass
class FeatureStats:
    """Mean and unbiased covariance of a feature set."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise DimensionMismatch(f"covariance {self.cov.shape} does not match mean of length {d}")
        if self.count < 2:
            raise TooFewSamples(f"feature statistics need at least 2 samples, got {self.count}")
        if not np.allclose(self.cov, self.cov.T, rtol=0.0, atol=1e-10):
            raise NonPSD("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class MetricsReport:
    """
    One evaluated (model, train missing rate, seed) cell.

    fid/is_score are measured on unconditional samples; fid_imputed and
    is_imputed on test images imputed with `method`. Only the former go into the CSV.
    """

    model_id: str
    train_missing_rate: float
    test_missing_rate: float
    seed: int
    fid: float
    is_score: float
    mse_all: float
    mse_missing: float | None
    wall_time_s: float
    fid_imputed: float | None = None
    is_imputed: float | None = None
    method: str | None = None

    def __post_init__(self):
        if self.fid < 0:
            raise InvalidValue(f"{self.model_id}: fid must be >= 0, got {self.fid}")
        if not 1.0 <= self.is_score <= 10.0:
            raise InvalidValue(f"{self.model_id}: is_score must lie in [1, 10], got {self.is_score}")
        if self.mse_all < 0 or (self.mse_missing is not None and self.mse_missing < 0):
            raise InvalidValue(f"{self.model_id}: mse must be >= 0")

    def csv_row(self) -> list:
        return [self.model_id, self.train_missing_rate, self.test_missing_rate, self.seed,
                self.fid, self.is_score, self.mse_all,
                "" if self.mse_missing is None else self.mse_missing, self.wall_time_s]


@dataclass
class ImputationReport:
    """Imputation error of one method on one cell's test images."""

    model_id: str
    method: str
    train_missing_rate: float
    test_missing_rate: float
    seed: int
    mse_all: float
    mse_missing: float | None
    wall_time_s: float

    def __post_init__(self):
        if self.mse_all < 0 or (self.mse_missing is not None and self.mse_missing < 0):
            raise InvalidValue(f"{self.model_id}/{self.method}: mse must be >= 0")

    def csv_row(self) -> list:
        return [self.model_id, self.method, self.train_missing_rate, self.test_missing_rate, self.seed,
                self.mse_all, "" if self.mse_missing is None else self.mse_missing, self.wall_time_s]


def train_classifier(dataset: ImageBatch, epochs: int = config.CLASSIFIER_EPOCHS,
                     learning_rate: float = config.LR_CLASSIFIER, batch_size: int = config.BATCH_SIZE,
                     seed: int = 0, device=None, console: Console | None = None) -> ModelCheckpoint:
    """
    Train the evaluation classifier on complete labeled images.

    Args:
        dataset: Complete images with labels
        epochs: Training epochs
        learning_rate: Adam learning rate
        batch_size: Minibatch size
        seed: Initialization and shuffling seed
        device: Torch device name
        console: Rich console for a progress bar

    Returns:
        ModelCheckpoint: kind "classifier"; classifier_outputs gives probabilities and features
    """
    if len(dataset) == 0:
        raise EmptyDataset("train_classifier: dataset is empty")
    if dataset.labels is None:
        raise ValueError("train_classifier needs labeled images")
    with seeded_global_rng(seed):
        model = Classifier()
    model = model.to(resolve_device(device))
    device = next(model.parameters()).device
    x = torch.from_numpy(dataset.data).to(device)
    y = torch.from_numpy(dataset.labels).to(device)

    def loss_fn(batch, generator):
        return F.cross_entropy(model(batch[0]), batch[1])

    trace = fit(model, loss_fn, (x, y), epochs=epochs, batch_size=batch_size, learning_rate=learning_rate,
                seed=seed, description="Classifier", console=console)
    return ModelCheckpoint.from_module("classifier", model, {
        "seed": seed, "epochs": epochs, "learning_rate": learning_rate, "loss_trace": trace,
    })


def load_classifier(ckpt: ModelCheckpoint, device=None) -> Classifier:
    if ckpt.kind != "classifier":
        raise ValueError(f"expected a classifier checkpoint, got '{ckpt.kind}'")
    model = Classifier()
    ckpt.load_into(model)
    return model.to(resolve_device(device)).eval()


def classifier_outputs(ckpt_or_model, images: ImageBatch, batch_size: int = 1000,
                       device=None) -> tuple[np.ndarray, np.ndarray]:
    """
    Softmax probabilities [N, 10] and penultimate features [N, 64] for a set of images.
    """
    model = ckpt_or_model if isinstance(ckpt_or_model, Classifier) else load_classifier(ckpt_or_model, device)
    device = next(model.parameters()).device
    probs, feats = [], []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(images.data[start:start + batch_size]).to(device)
            h = model.features(x)
            probs.append(torch.softmax(model.fc2(h), dim=1).double().cpu().numpy())
            feats.append(h.double().cpu().numpy())
    if not probs:
        return np.empty((0, 10)), np.empty((0, model.fc1.out_features))
    return np.concatenate(probs), np.concatenate(feats)


def accuracy(ckpt_or_model, images: ImageBatch, device=None) -> float:
    if images.labels is None:
        raise ValueError("accuracy needs labeled images")
    probs, _ = classifier_outputs(ckpt_or_model, images, device=device)
    return float((probs.argmax(axis=1) == images.labels).mean())


def stats_from_features(features, batch_size: int = 1000) -> FeatureStats:
    """
    Mean and unbiased covariance accumulated batch by batch.

    Batches are merged in order with the pairwise update of count, mean and
    scatter matrix, so the result does not depend on holding all features at once.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeMismatch(f"features must be [N, d], got {features.shape}")
    count, mean = 0, np.zeros(features.shape[1])
    scatter = np.zeros((features.shape[1], features.shape[1]))
    for start in range(0, features.shape[0], batch_size):
        block = features[start:start + batch_size]
        n_b = block.shape[0]
        mean_b = block.mean(axis=0)
        centered = block - mean_b
        delta = mean_b - mean
        total = count + n_b
        scatter += centered.T @ centered + np.outer(delta, delta) * (count * n_b / total)
        mean = mean + delta * (n_b / total)
        count = total
    if count < 2:
        raise TooFewSamples(f"feature statistics need at least 2 samples, got {count}")
    cov = scatter / (count - 1)
    return FeatureStats(mean, (cov + cov.T) / 2, count)


def feature_stats(classifier_ckpt, images: ImageBatch, device=None) -> FeatureStats:
    """FID statistics of the classifier's penultimate features."""
    if len(images) < 2:
        raise TooFewSamples(f"feature statistics need at least 2 images, got {len(images)}")
    _, features = classifier_outputs(classifier_ckpt, images, device=device)
    return stats_from_features(features)


def _psd_eigenvalues(matrix: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    values, vectors = linalg.eigh(matrix)
    if values.size and values.min() < -PSD_TOLERANCE:
        raise NonPSD(f"{what} has eigenvalue {values.min():.3g} below -{PSD_TOLERANCE}")
    return np.clip(values, 0.0, None), vectors


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """
    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the square root is taken through the symmetric form
    (S_a^(1/2) S_b S_a^(1/2))^(1/2), both roots via eigendecomposition.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"feature dimensions differ: {a.dim} vs {b.dim}")
    values, vectors = _psd_eigenvalues(a.cov, "first covariance")
    _psd_eigenvalues(b.cov, "second covariance")
    sqrt_a = (vectors * np.sqrt(values)) @ vectors.T
    inner = sqrt_a @ b.cov @ sqrt_a
    inner_values, _ = _psd_eigenvalues((inner + inner.T) / 2, "covariance product")
    diff = a.mean - b.mean
    fid = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(inner_values).sum())
    return max(fid, 0.0)


def inception_score(probs) -> float:
    """
    exp(mean KL(p(y|x) || p(y))) over a single split, clipped to [1, K].

    Values past the bounds by more than rounding are logged before clipping.

    Raises:
        NotNormalized: Some row is negative or does not sum to 1 within 1e-5
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ShapeMismatch(f"probabilities must be [N, K] with N >= 1, got {probs.shape}")
    row_sums = probs.sum(axis=1)
    if (probs < 0).any() or np.abs(row_sums - 1.0).max() > 1e-5:
        bad = int(np.argmax(np.abs(row_sums - 1.0)))
        raise NotNormalized(f"row {bad} sums to {row_sums[bad]:.6f}")
    marginal = probs.mean(axis=0)
    kl = special.rel_entr(probs, marginal[None, :]).sum(axis=1)
    score = math.exp(kl.mean())
    num_classes = probs.shape[1]
    if not 1.0 - IS_BOUND_SLACK <= score <= num_classes * (1.0 + IS_BOUND_SLACK):
        logger.warning(f"Inception score {score!r} outside [1, {num_classes}], clipped; check the probabilities")
    return float(np.clip(score, 1.0, num_classes))


def imputation_mse(x_true, x_imputed, mask) -> tuple[float, float | None]:
    """
    Mean squared error over all pixels and over missing pixels only.

    Returns:
        tuple: (mse_all, mse_missing); mse_missing is None when nothing is missing
    """
    x_true, x_imputed = (np.asarray(getattr(a, "data", a), dtype=np.float64) for a in (x_true, x_imputed))
    mask = np.asarray(getattr(mask, "masks", mask))
    if x_true.shape != x_imputed.shape or x_true.shape != mask.shape:
        raise ShapeMismatch(f"x_true {x_true.shape}, x_imputed {x_imputed.shape}, mask {mask.shape}")
    sq = (x_true - x_imputed) ** 2
    missing = mask == 0
    mse_missing = float(sq[missing].mean()) if missing.any() else None
    return float(sq.mean()), mse_missing


def write_metrics_csv(reports: list[MetricsReport], path: str):
    """Append rows to the metrics CSV, writing the header when the file is new."""
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new_file:
            writer.writerow(CSV_HEADER)
        for report in reports:
            writer.writerow(report.csv_row())


def read_metrics_csv(path: str) -> list[MetricsReport]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [
            MetricsReport(
                model_id=row["model_id"],
                train_missing_rate=float(row["train_mr"]),
                test_missing_rate=float(row["test_mr"]),
                seed=int(row["seed"]),
                fid=float(row["fid"]),
                is_score=float(row["is"]),
                mse_all=float(row["mse_all"]),
                mse_missing=float(row["mse_missing"]) if row["mse_missing"] else None,
                wall_time_s=float(row["wall_time_s"]),
            )
            for row in reader
        ]


def _write_rows_json(row_type, reports: list, path: str):
    payload = {
        "columns": [f.name for f in fields(row_type)],
        "wall_time_comparable": False,
        "rows": [asdict(r) for r in reports],
    }
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w") as f:
        json.dump(payload, f, indent=2)
    os.replace(tmp_path, path)


def write_metrics_json(reports: list[MetricsReport], path: str):
    """JSON mirror of the CSV. Wall times are marked as not comparable across models."""
    _write_rows_json(MetricsReport, reports, path)


def write_imputation_json(reports: list[ImputationReport], path: str):
    _write_rows_json(ImputationReport, reports, path)


def read_imputation_json(path: str) -> list[ImputationReport]:
    with open(path, "r", encoding="utf-8") as f:
        return [ImputationReport(**row) for row in json.load(f)["rows"]]


def write_imputation_csv(reports: list[ImputationReport], path: str):
    """Rewrite the per-method imputation table."""
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(IMPUTATION_CSV_HEADER)
        for report in reports:
            writer.writerow(report.csv_row())
    os.replace(tmp_path, path)


def read_imputation_csv(path: str) -> list[ImputationReport]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != IMPUTATION_CSV_HEADER:
            raise ValueError(f"{path}: unexpected imputation header {reader.fieldnames}")
        return [
            ImputationReport(
                model_id=row["model_id"],
                method=row["method"],
                train_missing_rate=float(row["train_mr"]),
                test_missing_rate=float(row["test_mr"]),
                seed=int(row["seed"]),
                mse_all=float(row["mse_all"]),
                mse_missing=float(row["mse_missing"]) if row["mse_missing"] else None,
                wall_time_s=float(row["wall_time_s"]),
            )
            for row in reader
        ]

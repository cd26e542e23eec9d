"""Layout of the output directory."""

import os
from dataclasses import dataclass


def rate_tag(rate: float) -> str:
    return f"mr{rate:.2f}"


def grid_path(artifact_path: str) -> str:
    """PNG grid stored next to an array artifact."""
    return os.path.splitext(artifact_path)[0] + ".png"


@dataclass(frozen=True)
class CellPaths:
    """Files of one (model, train missing rate, seed) cell of the sweep."""

    directory: str

    @property
    def vae(self) -> str:
        return os.path.join(self.directory, "vae.ckpt")

    @property
    def score(self) -> str:
        return os.path.join(self.directory, "score.ckpt")

    @property
    def samples(self) -> str:
        return os.path.join(self.directory, "samples.ckpt")

    @property
    def imputations(self) -> str:
        return os.path.join(self.directory, "imputations.ckpt")

    def baseline_imputations(self, method: str) -> str:
        return os.path.join(self.directory, f"imputations_{method}.ckpt")

    @property
    def imputation_metrics(self) -> str:
        return os.path.join(self.directory, "imputation_metrics.json")

    @property
    def metrics(self) -> str:
        return os.path.join(self.directory, "metrics.json")


class OutputLayout:
    """Paths under an experiment's output root."""

    def __init__(self, root: str):
        self.root = root

    def ensure(self, path: str) -> str:
        os.makedirs(path, exist_ok=True)
        return path

    @property
    def data_dir(self) -> str:
        return os.path.join(self.root, "data")

    @property
    def classifier_dir(self) -> str:
        return os.path.join(self.root, "classifier")

    @property
    def classifier(self) -> str:
        return os.path.join(self.classifier_dir, "classifier.ckpt")

    @property
    def plots_dir(self) -> str:
        return os.path.join(self.root, "plots")

    @property
    def metrics_csv(self) -> str:
        return os.path.join(self.root, "metrics.csv")

    @property
    def metrics_json(self) -> str:
        return os.path.join(self.root, "metrics.json")

    @property
    def imputation_csv(self) -> str:
        return os.path.join(self.root, "imputation.csv")

    @property
    def config_snapshot(self) -> str:
        return os.path.join(self.root, "config.json")

    def masks(self, role: str, rate: float, seed: int) -> str:
        return os.path.join(self.data_dir, f"{role}_{rate_tag(rate)}_seed{seed}.masks")

    def cell(self, model: str, rate: float, seed: int) -> CellPaths:
        return CellPaths(os.path.join(self.root, "cells", model, rate_tag(rate), f"seed{seed}"))

"""
Time-conditioned score networks and denoising score matching.

The network predicts the noise eps added to x_t; the score is -eps_hat / sigma(t).
With the weighting lambda_t = sigma_t^2 the loss is the per-dimension
eps-prediction error, and the masked variant restricts it to observed dims.
"""

import logging
from dataclasses import dataclass, field, asdict
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
from rich.console import Console

from . import config
from .checkpoint import ModelCheckpoint
from .data import DatasetSplit
from .errors import AllMissingSample, EmptyBatch, EmptyDataset, NonFiniteOutput, ShapeMismatch
from .networks import ScoreMLP, ScoreUNet
from .sde import DiffusionSchedule, _broadcast, marginal_coeffs
from .training import fit, resolve_device, seeded_global_rng

logger = logging.getLogger(__name__)

LossKind = Literal["full", "masked"]


@dataclass
class ScoreNetConfig:
    base_channels: int = 24
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 2])
    blocks_per_resolution: int = 2
    attention_resolutions: list[int] = field(default_factory=list)
    dropout: float = 0.12
    norm_groups: int = 8
    input_shape: tuple[int, ...] = (1, 28, 28)
    architecture: str = "unet"
    skip_rescale: float = config.SKIP_RESCALE
    embedding_scale: float = config.TIME_EMBEDDING_SCALE

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.channel_multipliers = list(self.channel_multipliers)
        self.attention_resolutions = list(self.attention_resolutions)
        if self.architecture not in ("unet", "mlp"):
            raise ValueError(f"architecture must be 'unet' or 'mlp', got '{self.architecture}'")
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must not be empty")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.base_channels % 2:
            raise ValueError(f"base_channels must be even, got {self.base_channels}")
        if self.architecture == "unet":
            if self.base_channels % self.norm_groups:
                raise ValueError(
                    f"base_channels {self.base_channels} is not divisible by norm_groups {self.norm_groups}"
                )
            if len(self.input_shape) != 3:
                raise ValueError(f"unet expects a (C, H, W) input_shape, got {self.input_shape}")

    @classmethod
    def for_space(cls, space: str, profile: str = "desk", input_shape=None) -> "ScoreNetConfig":
        """Profile defaults for "pixel" (1x28x28) or "latent" (2x7x7) score networks."""
        table = config.PIXEL_NET if space == "pixel" else config.LATENT_NET
        default_shape = (1, 28, 28) if space == "pixel" else (config.VAE_LATENT_CHANNELS, *config.VAE_LATENT_SPATIAL)
        return cls(**table[profile], input_shape=input_shape or default_shape)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["input_shape"] = list(self.input_shape)
        return data


@dataclass
class TrainConfig:
    batch_size: int = config.BATCH_SIZE
    epochs: int = config.EPOCHS
    learning_rate: float = config.LR_PIXEL
    seed: int = 42
    missing_rate: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")

    def to_dict(self) -> dict:
        return asdict(self)


class ScoreModel(nn.Module):
    """Wraps a noise-prediction network and turns its output into a score."""

    def __init__(self, net_config: ScoreNetConfig, schedule: DiffusionSchedule | None = None):
        super().__init__()
        self.net_config = net_config
        self.schedule = schedule or DiffusionSchedule()
        self.net = ScoreUNet(net_config) if net_config.architecture == "unet" else ScoreMLP(net_config)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        sigma = _broadcast(marginal_coeffs(self.schedule, t).sigma, x)
        return -self.net(x, t) / sigma


def score_forward(model: ScoreModel, x: torch.Tensor, t) -> torch.Tensor:
    """
    Evaluate s_theta(x, t) for a batch, checking the shape contract and finiteness.

    Raises:
        ShapeMismatch: x is not [B, *input_shape]
        NonFiniteOutput: The network produced NaN or inf from finite input
    """
    expected = model.net_config.input_shape
    if tuple(x.shape[1:]) != tuple(expected):
        raise ShapeMismatch(f"score network expects [B, {', '.join(map(str, expected))}], got {tuple(x.shape)}")
    if not isinstance(t, torch.Tensor) or t.ndim == 0:
        t = torch.full((x.shape[0],), float(t), dtype=x.dtype, device=x.device)
    out = model(x, t)
    if torch.isfinite(x).all() and not torch.isfinite(out).all():
        raise NonFiniteOutput("score network produced non-finite values")
    return out


def _perturb(x0: torch.Tensor, schedule: DiffusionSchedule, generator: torch.Generator):
    """Draw t ~ U(tau, 1) and eps ~ N(0, I) per sample; return t, eps, x_t and sigma (broadcast)."""
    batch = x0.shape[0]
    t = schedule.tau + (1.0 - schedule.tau) * torch.rand(batch, generator=generator, device=x0.device, dtype=x0.dtype)
    eps = torch.randn(x0.shape, generator=generator, device=x0.device, dtype=x0.dtype)
    coeffs = marginal_coeffs(schedule, t)
    alpha, sigma = _broadcast(coeffs.alpha, x0), _broadcast(coeffs.sigma, x0)
    return t, eps, alpha * x0 + sigma * eps, sigma


def _weighted_residual(model, x0, schedule, generator):
    t, eps, xt, sigma = _perturb(x0, schedule, generator)
    # -eps / sigma is grad log p_0t(x_t | x_0) evaluated at this draw
    residual = model(xt, t) + eps / sigma
    return sigma ** 2 * residual ** 2


def dsm_loss(model: ScoreModel, x0: torch.Tensor, schedule: DiffusionSchedule, generator: torch.Generator) -> torch.Tensor:
    """Batch mean of lambda_t * ||s_theta(x_t, t) + eps / sigma_t||^2 / p with lambda_t = sigma_t^2."""
    if x0.shape[0] == 0:
        raise EmptyBatch("dsm_loss needs at least one sample")
    weighted = _weighted_residual(model, x0, schedule, generator)
    return weighted.flatten(1).mean(dim=1).mean()


def masked_dsm_loss(model: ScoreModel, x0_zero_imputed: torch.Tensor, masks: torch.Tensor,
                    schedule: DiffusionSchedule, generator: torch.Generator) -> torch.Tensor:
    """
    Masked objective: residuals only on observed dims, normalized by their count.

    Raises:
        EmptyBatch: No samples
        ShapeMismatch: Masks not aligned with the batch
        AllMissingSample: Some sample has no observed entry
    """
    if x0_zero_imputed.shape[0] == 0:
        raise EmptyBatch("masked_dsm_loss needs at least one sample")
    if masks.shape != x0_zero_imputed.shape:
        raise ShapeMismatch(f"masks {tuple(masks.shape)} vs batch {tuple(x0_zero_imputed.shape)}")
    masks = masks.to(x0_zero_imputed.dtype)
    observed = masks.flatten(1).sum(dim=1)
    if bool((observed == 0).any()):
        raise AllMissingSample(f"sample {int(torch.nonzero(observed == 0)[0])} has no observed entries")
    weighted = _weighted_residual(model, x0_zero_imputed, schedule, generator)
    return ((masks * weighted).flatten(1).sum(dim=1) / observed).mean()


def build_score_model(net_config: ScoreNetConfig, schedule: DiffusionSchedule, seed: int, device=None) -> ScoreModel:
    with seeded_global_rng(seed):
        model = ScoreModel(net_config, schedule)
    return model.to(resolve_device(device))


def fit_score(model: ScoreModel, x0: torch.Tensor, masks: torch.Tensor | None, train_config: TrainConfig,
              loss_kind: LossKind, description: str, console: Console | None = None) -> list[float]:
    """Optimize a score model on in-memory tensors with the full or masked objective."""
    schedule = model.schedule
    if loss_kind == "masked":
        if masks is None:
            masks = torch.ones_like(x0)

        def loss_fn(batch, generator):
            return masked_dsm_loss(model, batch[0], batch[1], schedule, generator)
        arrays = (x0, masks)
    else:
        def loss_fn(batch, generator):
            return dsm_loss(model, batch[0], schedule, generator)
        arrays = (x0,)
    return fit(model, loss_fn, arrays, epochs=train_config.epochs, batch_size=train_config.batch_size,
               learning_rate=train_config.learning_rate, seed=train_config.seed,
               description=description, console=console)


def _score_checkpoint(model: ScoreModel, space: str, train_config: TrainConfig, loss_kind: str,
                      trace: list[float], extra: dict | None = None) -> ModelCheckpoint:
    metadata = {
        "space": space,
        "net_config": model.net_config.to_dict(),
        "train_config": train_config.to_dict(),
        "schedule": model.schedule.to_dict(),
        "seed": train_config.seed,
        "loss_kind": loss_kind,
        "loss_trace": trace,
    }
    metadata.update(extra or {})
    return ModelCheckpoint.from_module("score", model, metadata)


def train_score(train_config: TrainConfig, net_config: ScoreNetConfig, dataset: DatasetSplit,
                loss_kind: LossKind = "masked", schedule: DiffusionSchedule | None = None,
                init_checkpoint: ModelCheckpoint | None = None, device=None,
                console: Console | None = None) -> ModelCheckpoint:
    """
    Train a pixel-space score network on a (possibly incomplete) split.

    Args:
        train_config: Batch size, epochs, learning rate, seed
        net_config: Network architecture
        dataset: Split whose missing pixels are zero-imputed before training
        loss_kind: "masked" (observed dims only) or "full"
        schedule: Noise schedule, defaults to the standard VP schedule
        init_checkpoint: Warm start from these parameters instead of a fresh init
        device: Torch device name
        console: Rich console for a progress bar

    Returns:
        ModelCheckpoint: Final parameters, configs, seed and per-epoch loss trace
    """
    if len(dataset) == 0:
        raise EmptyDataset("train_score: dataset is empty")
    schedule = schedule or DiffusionSchedule()
    model = build_score_model(net_config, schedule, train_config.seed, device)
    if init_checkpoint is not None:
        init_checkpoint.load_into(model)
    device = next(model.parameters()).device
    x0 = torch.from_numpy(dataset.zero_imputed().data).to(device)
    masks = torch.from_numpy(dataset.masks.masks.astype(np.float32)).to(device)
    logger.info(
        f"Training pixel score model: {len(dataset)} images, loss={loss_kind}, "
        f"missing_rate={dataset.masks.rate}, seed={train_config.seed}"
    )
    trace = fit_score(model, x0, masks, train_config, loss_kind, "Score model", console)
    return _score_checkpoint(model, "pixel", train_config, loss_kind, trace,
                             {"missing_rate": dataset.masks.rate})


def train_latent_score(train_config: TrainConfig, net_config: ScoreNetConfig, vae_ckpt: ModelCheckpoint,
                       dataset: DatasetSplit, schedule: DiffusionSchedule | None = None, device=None,
                       console: Console | None = None) -> ModelCheckpoint:
    """
    Train a score network on scaled VAE latents of the zero-imputed split.

    Latent space has no missing dimensions, so the full objective is used.
    """
    from . import vae

    if len(dataset) == 0:
        raise EmptyDataset("train_latent_score: dataset is empty")
    schedule = schedule or DiffusionSchedule()
    vae_model = vae.load_vae(vae_ckpt, device)
    scale = float(vae_ckpt.metadata["latent_scale"])
    latents = vae.encode_dataset(vae_model, dataset, seed=train_config.seed, scale=scale)
    model = build_score_model(net_config, schedule, train_config.seed, device)
    logger.info(f"Training latent score model on {latents.shape[0]} latents, scale={scale:.4f}")
    trace = fit_score(model, latents.to(next(model.parameters()).device), None, train_config, "full",
                      "Latent score model", console)
    return _score_checkpoint(model, "latent", train_config, "full", trace,
                             {"missing_rate": dataset.masks.rate, "latent_scale": scale})


def load_score_model(ckpt: ModelCheckpoint, device=None) -> ScoreModel:
    """Rebuild a score model from its checkpoint, in evaluation mode."""
    net_config = ScoreNetConfig(**ckpt.metadata["net_config"])
    schedule = DiffusionSchedule(**ckpt.metadata["schedule"])
    model = ScoreModel(net_config, schedule)
    ckpt.load_into(model)
    return model.to(resolve_device(device)).eval()


def load_score_fn(ckpt: ModelCheckpoint, device=None):
    """Evaluation-mode callable (x, t) -> score for a score checkpoint."""
    model = load_score_model(ckpt, device)

    def score_fn(x, t):
        return model(x, t)

    score_fn.model = model
    return score_fn

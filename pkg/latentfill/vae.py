"""
KL-regularized convolutional VAE trained on incomplete images.

The reconstruction term is a masked MSE over observed pixels only; the KL term
against N(0, I) is weighted by beta_kl. Latents handed to the diffusion model
are multiplied by a standardization factor and divided back before decoding.
"""

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
from rich.console import Console
from scipy import integrate, stats

from . import config
from .checkpoint import ModelCheckpoint
from .data import DatasetSplit, ImageBatch
from .errors import AllMissingSample, DegenerateLatents, EmptyDataset, ShapeMismatch, TooFewSamples
from .networks import Decoder, Encoder
from .training import fit, resolve_device, seeded_global_rng

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (1, 28, 28)


@dataclass
class VaeConfig:
    channel_multipliers: list[int] = field(default_factory=lambda: list(config.VAE_CHANNEL_MULTIPLIERS))
    latent_channels: int = config.VAE_LATENT_CHANNELS
    latent_spatial: tuple[int, int] = config.VAE_LATENT_SPATIAL
    beta_kl: float = config.VAE_BETA_KL
    base_channels: int = config.VAE_BASE_CHANNELS
    norm_groups: int = 8
    mask_as_input: bool = False
    use_latent_mean: bool = False

    def __post_init__(self):
        self.channel_multipliers = list(self.channel_multipliers)
        self.latent_spatial = tuple(int(s) for s in self.latent_spatial)
        if not self.channel_multipliers:
            raise ValueError("channel_multipliers must not be empty")
        if self.beta_kl < 0:
            raise ValueError(f"beta_kl must be >= 0, got {self.beta_kl}")
        if self.latent_dim >= math.prod(IMAGE_SHAPE):
            raise ValueError(f"latent dimensionality {self.latent_dim} must be below {math.prod(IMAGE_SHAPE)}")
        resolution = IMAGE_SHAPE[1]
        for _ in self.channel_multipliers[1:]:
            resolution = (resolution + 1) // 2
        if self.latent_spatial != (resolution, resolution):
            raise ValueError(
                f"{len(self.channel_multipliers)} levels map {IMAGE_SHAPE[1]}x{IMAGE_SHAPE[2]} to "
                f"{resolution}x{resolution}, not {self.latent_spatial}"
            )

    @property
    def latent_dim(self) -> int:
        return self.latent_channels * math.prod(self.latent_spatial)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, *self.latent_spatial)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["latent_spatial"] = list(self.latent_spatial)
        return data


@dataclass
class LatentBatch:
    """Encoder posterior parameters for a batch plus the standardization factor."""

    mu: torch.Tensor
    logvar: torch.Tensor
    scale: float = 1.0

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ShapeMismatch(f"mu {tuple(self.mu.shape)} vs logvar {tuple(self.logvar.shape)}")
        if not torch.isfinite(self.logvar).all():
            raise ValueError("logvar must be finite")
        if not self.scale > 0:
            raise ValueError(f"latent scale must be positive, got {self.scale}")

    def scaled_mean(self) -> torch.Tensor:
        return self.mu * self.scale

    def scaled_sample(self, eps: torch.Tensor) -> torch.Tensor:
        return reparameterize(self.mu, self.logvar, eps) * self.scale


class VAE(nn.Module):
    def __init__(self, vae_config: VaeConfig):
        super().__init__()
        self.vae_config = vae_config
        self.encoder = Encoder(vae_config)
        self.decoder = Decoder(vae_config)


def encode(model: VAE, x: torch.Tensor, mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Posterior parameters of q(z | x) for a batch of zero-imputed images.

    Args:
        model: VAE
        x: Images [B, 1, 28, 28]
        mask: Observation masks, only read when the encoder takes the mask as input

    Returns:
        tuple: (mu, logvar), each [B, latent_channels, 7, 7]
    """
    if tuple(x.shape[1:]) != IMAGE_SHAPE:
        raise ShapeMismatch(f"encoder expects [B, 1, 28, 28], got {tuple(x.shape)}")
    if model.vae_config.mask_as_input:
        mask = torch.ones_like(x) if mask is None else mask.to(x)
        x = torch.cat([x, mask], dim=1)
    return model.encoder(x)


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps"""
    if mu.shape != logvar.shape or mu.shape != eps.shape:
        raise ShapeMismatch(f"mu {tuple(mu.shape)}, logvar {tuple(logvar.shape)}, eps {tuple(eps.shape)}")
    return mu + torch.exp(0.5 * logvar) * eps


def decode(model: VAE, z: torch.Tensor) -> torch.Tensor:
    expected = model.vae_config.latent_shape
    if tuple(z.shape[1:]) != expected:
        raise ShapeMismatch(f"decoder expects [B, {', '.join(map(str, expected))}], got {tuple(z.shape)}")
    return model.decoder(z)


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL(N(mu, exp(logvar)) || N(0, I)) per sample."""
    return 0.5 * (torch.exp(logvar) + mu ** 2 - 1.0 - logvar).flatten(1).sum(dim=1)


def masked_elbo(model: VAE, x_zero_imputed: torch.Tensor, mask: torch.Tensor, eps: torch.Tensor,
                beta_kl: float) -> torch.Tensor:
    """
    Negative ELBO with the reconstruction error restricted to observed pixels.

    Missing pixels are zeroed before encoding, so values at masked-out
    positions never influence the loss.

    Args:
        model: VAE
        x_zero_imputed: Images [B, 1, 28, 28]
        mask: 1 = observed, 0 = missing
        eps: Standard normal draw shaped like the latents
        beta_kl: KL weight

    Returns:
        torch.Tensor: Batch mean of masked MSE + beta_kl * KL
    """
    if mask.shape != x_zero_imputed.shape:
        raise ShapeMismatch(f"mask {tuple(mask.shape)} vs images {tuple(x_zero_imputed.shape)}")
    mask = mask.to(x_zero_imputed.dtype)
    observed = mask.flatten(1).sum(dim=1)
    if bool((observed == 0).any()):
        raise AllMissingSample(f"sample {int(torch.nonzero(observed == 0)[0])} has no observed pixels")
    x = x_zero_imputed * mask
    mu, logvar = encode(model, x, mask)
    x_hat = decode(model, reparameterize(mu, logvar, eps))
    recon = (mask * (x - x_hat) ** 2).flatten(1).sum(dim=1) / observed
    return (recon + beta_kl * kl_divergence(mu, logvar)).mean()


def scale_from_latents(latents) -> float:
    """
    Standardization factor 1 / std over every component of a set of latents.

    Raises:
        TooFewSamples: Fewer than 256 latent samples
        DegenerateLatents: The latents are (numerically) constant
    """
    latents = np.asarray(latents.detach().cpu() if isinstance(latents, torch.Tensor) else latents, dtype=np.float64)
    if latents.shape[0] < config.LATENT_SCALE_MIN_SAMPLES:
        raise TooFewSamples(
            f"latent scale needs at least {config.LATENT_SCALE_MIN_SAMPLES} samples, got {latents.shape[0]}"
        )
    std = float(latents.std())
    if std < 1e-8:
        raise DegenerateLatents(f"latent std {std:.3g} is below 1e-8")
    return 1.0 / std


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def _split_tensors(dataset: DatasetSplit, device):
    x = torch.from_numpy(dataset.zero_imputed().data).to(device)
    masks = torch.from_numpy(dataset.masks.masks.astype(np.float32)).to(device)
    return x, masks


def latent_scale(model: VAE, dataset: DatasetSplit, subset: int = config.LATENT_SCALE_SUBSET,
                 batch_size: int = config.BATCH_SIZE) -> float:
    """1 / std of the encoder means over the first `subset` images of a split."""
    dataset = DatasetSplit(dataset.images.subset(slice(0, subset)), dataset.masks.subset(slice(0, subset)), dataset.role)
    device = next(model.parameters()).device
    x, masks = _split_tensors(dataset, device)
    means = []
    with torch.no_grad():
        for rows in _batches(x.shape[0], batch_size):
            mu, _ = encode(model, x[rows], masks[rows])
            means.append(mu.cpu())
    return scale_from_latents(torch.cat(means) if means else torch.empty(0))


def encode_dataset(model: VAE, dataset: DatasetSplit, seed: int, use_mean: bool | None = None,
                   batch_size: int = config.BATCH_SIZE, scale: float = 1.0) -> torch.Tensor:
    """
    Latents for every image of a split, multiplied by `scale`.

    Reparameterized draws z = mu + sigma * eps by default; encoder means when
    `use_mean` (or the config's use_latent_mean) is set.
    """
    if use_mean is None:
        use_mean = model.vae_config.use_latent_mean
    device = next(model.parameters()).device
    x, masks = _split_tensors(dataset, device)
    generator = torch.Generator(device=device).manual_seed(int(seed))
    latents = []
    with torch.no_grad():
        for rows in _batches(x.shape[0], batch_size):
            batch = LatentBatch(*encode(model, x[rows], masks[rows]), scale=scale)
            if use_mean:
                latents.append(batch.scaled_mean().cpu())
            else:
                eps = torch.randn(batch.mu.shape, generator=generator, device=device, dtype=batch.mu.dtype)
                latents.append(batch.scaled_sample(eps).cpu())
    return torch.cat(latents)


def train_vae(train_config, vae_config: VaeConfig, dataset: DatasetSplit, device=None,
              console: Console | None = None) -> ModelCheckpoint:
    """
    Fit the VAE on a split with the masked ELBO and record its latent scale.

    Args:
        train_config: TrainConfig (batch size, epochs, learning rate, seed)
        vae_config: Architecture and beta_kl
        dataset: Training split with persistent masks
        device: Torch device name
        console: Rich console for a progress bar

    Returns:
        ModelCheckpoint: kind "vae" with vae_config, latent_scale and loss trace
    """
    if len(dataset) == 0:
        raise EmptyDataset("train_vae: dataset is empty")
    with seeded_global_rng(train_config.seed):
        model = VAE(vae_config)
    model = model.to(resolve_device(device))
    device = next(model.parameters()).device
    x, masks = _split_tensors(dataset, device)
    latent_shape = vae_config.latent_shape

    def loss_fn(batch, generator):
        eps = torch.randn((batch[0].shape[0], *latent_shape), generator=generator, device=device)
        return masked_elbo(model, batch[0], batch[1], eps, vae_config.beta_kl)

    logger.info(f"Training VAE: {len(dataset)} images, missing_rate={dataset.masks.rate}, seed={train_config.seed}")
    trace = fit(model, loss_fn, (x, masks), epochs=train_config.epochs, batch_size=train_config.batch_size,
                learning_rate=train_config.learning_rate, seed=train_config.seed,
                description="VAE", console=console)
    try:
        scale = latent_scale(model, dataset)
    except TooFewSamples:
        logger.warning(f"Only {len(dataset)} images, latent scale left at 1.0")
        scale = 1.0
    logger.info(f"VAE latent scale: {scale:.5f}")
    return ModelCheckpoint.from_module("vae", model, {
        "vae_config": vae_config.to_dict(),
        "train_config": train_config.to_dict(),
        "seed": train_config.seed,
        "missing_rate": dataset.masks.rate,
        "latent_scale": scale,
        "loss_trace": trace,
    })


def load_vae(ckpt: ModelCheckpoint, device=None) -> VAE:
    model = VAE(VaeConfig(**ckpt.metadata["vae_config"]))
    ckpt.load_into(model)
    return model.to(resolve_device(device)).eval()


def reconstruct(model: VAE, images: ImageBatch, masks: np.ndarray | None = None,
                batch_size: int = config.BATCH_SIZE) -> np.ndarray:
    """decode(encoder mean) of the zero-imputed images, as a numpy array."""
    device = next(model.parameters()).device
    masks = np.ones_like(images.data) if masks is None else masks.astype(np.float32)
    x = torch.from_numpy(images.data * masks).to(device)
    m = torch.from_numpy(masks).to(device)
    out = []
    with torch.no_grad():
        for rows in _batches(x.shape[0], batch_size):
            mu, _ = encode(model, x[rows], m[rows])
            out.append(decode(model, mu).cpu().numpy())
    return np.concatenate(out) if out else np.empty((0, *IMAGE_SHAPE), dtype=np.float32)


def observed_log_likelihood(x, mean, mask, variance: float = 1.0) -> float:
    """Log-likelihood of the observed dims under a diagonal Gaussian decoder, summed term by term."""
    x, mean, mask = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (x, mean, mask))
    observed = mask > 0
    return float(stats.norm.logpdf(x[observed], loc=mean[observed], scale=math.sqrt(variance)).sum())


def marginalized_log_likelihood(x, mean, mask, variance: float = 1.0, width: float = 12.0) -> float:
    """
    Log of the full decoder likelihood p(x_obs, x_mis | z) integrated over the
    missing dims, for comparison with observed_log_likelihood.

    The integrand evaluates every dim of the image with the missing ones set to
    the integration variables. Only practical for a handful of missing dims;
    integration runs over mean +- width * sd.
    """
    x, mean, mask = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (x, mean, mask))
    sd = math.sqrt(variance)
    missing = np.flatnonzero(mask == 0)

    def log_joint(values) -> float:
        full = x.copy()
        full[missing] = values
        return float(stats.norm.logpdf(full, loc=mean, scale=sd).sum())

    if missing.size == 0:
        return log_joint(np.empty(0))
    # The joint peaks with the missing dims at their means; integrate relative to it
    peak = log_joint(mean[missing])

    def density(*values):
        return math.exp(log_joint(np.asarray(values)) - peak)

    ranges = [(mean[j] - width * sd, mean[j] + width * sd) for j in missing]
    value, _ = integrate.nquad(density, ranges, opts={"epsabs": 1e-13, "epsrel": 1e-10})
    return float(peak + math.log(value))

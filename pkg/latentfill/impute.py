"""
Conditional generation of missing pixels.

Replacement sampling, self-guidance in pixel space, self-guidance in a VAE
latent space, an autoencoder-only baseline and the EM retraining loop. The
run_* functions take a plain score callable so they can be driven by an
analytic score as well as a trained network; the *_impute functions take
checkpoints.
"""

import logging
import time
from typing import Callable

import numpy as np
import torch

from .checkpoint import ModelCheckpoint
from .data import DatasetSplit, ImageBatch, MaskSet
from .errors import LatentFillError, MethodModelMismatch, NonFiniteGradient, ShapeMismatch
from .imputers.base import GuidanceHook, ImputationRequest, ImputationResult
from .sde import (DiffusionSchedule, ScoreFn, batch_time, forward_sample, make_generator, reverse_step,
                  time_grid, tweedie_mean)

logger = logging.getLogger(__name__)

OBSERVATION_STREAM = 0x5EED  # xor-ed into the seed for replacement's observation noise

ToPixels = Callable[[torch.Tensor], torch.Tensor]


def guidance_direction(uncond_score: torch.Tensor, raw_guidance_grad: torch.Tensor) -> torch.Tensor:
    """
    Rescale the guidance gradient to the norm of the unconditional score, per sample.

    A zero gradient stays zero.
    """
    if uncond_score.shape != raw_guidance_grad.shape:
        raise ValueError(f"score {tuple(uncond_score.shape)} vs guidance {tuple(raw_guidance_grad.shape)}")
    score_norm = uncond_score.flatten(1).norm(dim=1)
    grad_norm = raw_guidance_grad.flatten(1).norm(dim=1)
    safe = torch.where(grad_norm > 0, grad_norm, torch.ones_like(grad_norm))
    factor = torch.where(grad_norm > 0, score_norm / safe, torch.zeros_like(grad_norm))
    return raw_guidance_grad * factor.reshape(-1, *([1] * (raw_guidance_grad.ndim - 1)))


def finalize_imputation(x0_hat: torch.Tensor, request: ImputationRequest) -> ImageBatch:
    """Clip to the pixel range and copy observed pixels verbatim from x_obs."""
    imputed = np.clip(x0_hat.detach().cpu().numpy().astype(np.float32), 0.0, 1.0)
    observed = request.mask.masks.astype(bool)
    return ImageBatch(np.where(observed, request.x_obs.data, imputed), request.x_obs.labels)


def _request_tensors(request: ImputationRequest, device, dtype):
    mask = torch.from_numpy(request.mask.masks.astype(np.float32)).to(device=device, dtype=dtype)
    x_obs = torch.from_numpy(request.x_obs.data).to(device=device, dtype=dtype) * mask
    return x_obs, mask


def run_replacement(score_fn: ScoreFn, request: ImputationRequest, schedule: DiffusionSchedule,
                    device=None, dtype=torch.float32, step_hook: GuidanceHook | None = None) -> ImageBatch:
    """
    Replacement sampling in pixel space.

    Before every score evaluation the observed dims are overwritten with a
    fresh draw from p_t(x_t^obs | x_0^obs); the missing dims follow the reverse
    SDE. Observation noise comes from its own stream, so with nothing observed
    the main stream matches unconditional sampling.
    """
    device = device or "cpu"
    x_obs, mask = _request_tensors(request, device, dtype)
    generator = make_generator(request.seed, device)
    obs_generator = make_generator(request.seed ^ OBSERVATION_STREAM, device)
    x = torch.randn(x_obs.shape, generator=generator, dtype=dtype, device=device)
    ts, dt = time_grid(schedule, request.steps)

    def replace(x, t):
        eps = torch.randn(x.shape, generator=obs_generator, dtype=dtype, device=device)
        return mask * forward_sample(schedule, x_obs, t, eps) + (1 - mask) * x

    with torch.no_grad():
        for i in range(len(ts) - 1):
            t = batch_time(ts[i], x)
            x = replace(x, t)
            score = score_fn(x, t)
            if step_hook is not None:
                step_hook(i, t, score, torch.zeros_like(score))
            noise = torch.randn(x.shape, generator=generator, dtype=dtype, device=device)
            x = reverse_step(schedule, x, t, dt, score, noise)
        t = batch_time(ts[-1], x)
        x = replace(x, t)
        x0_hat = tweedie_mean(schedule, x, t, score_fn(x, t))
    return finalize_imputation(x0_hat, request)


def run_guided(score_fn: ScoreFn, request: ImputationRequest, schedule: DiffusionSchedule,
               state_shape, to_pixels: ToPixels | None = None, device=None, dtype=torch.float32,
               step_hook: GuidanceHook | None = None) -> ImageBatch:
    """
    Self-guided reverse diffusion.

    Every step adds guidance_direction(s, g) to the unconditional score s,
    where g is the gradient w.r.t. the current state of
    -1/2 ||m * (x_obs - to_pixels(x0_hat(state)))||^2 and x0_hat is the
    Tweedie mean. The likelihood bandwidth is fixed to 1 since the rescaling
    removes it. With to_pixels the identity this is pixel guidance; with a
    decoder it is latent guidance.

    Args:
        score_fn: Score of the diffusion running over states shaped state_shape
        request: Images, masks, steps and seed
        schedule: Noise schedule
        state_shape: Per-sample shape of the diffusion state
        to_pixels: Maps a state-space x0 estimate to images (identity when None)
        device: Torch device
        dtype: Floating point type of the trajectory
        step_hook: Receives (step, t, unconditional score, applied guidance)

    Returns:
        ImageBatch: Final Tweedie estimate mapped to pixels, clipped and clamped

    Raises:
        NonFiniteGradient: The guidance gradient contains NaN or inf
    """
    device = device or "cpu"
    to_pixels = to_pixels or (lambda x: x)
    x_obs, mask = _request_tensors(request, device, dtype)
    generator = make_generator(request.seed, device)
    x = torch.randn((len(request), *state_shape), generator=generator, dtype=dtype, device=device)
    ts, dt = time_grid(schedule, request.steps)

    for i in range(len(ts) - 1):
        t = batch_time(ts[i], x)
        with torch.enable_grad():
            state = x.detach().requires_grad_(True)
            score = score_fn(state, t)
            x0_hat = to_pixels(tweedie_mean(schedule, state, t, score))
            objective = -0.5 * (mask * (x_obs - x0_hat)) ** 2
            grad, = torch.autograd.grad(objective.sum(), state)
        if not torch.isfinite(grad).all():
            raise NonFiniteGradient(f"guidance gradient became non-finite at step {i} (t={float(ts[i]):.4f})")
        score = score.detach()
        direction = guidance_direction(score, grad)
        if step_hook is not None:
            step_hook(i, t, score, direction)
        noise = torch.randn(x.shape, generator=generator, dtype=dtype, device=device)
        with torch.no_grad():
            x = reverse_step(schedule, x, t, dt, score + direction, noise)
    with torch.no_grad():
        t = batch_time(ts[-1], x)
        x0_hat = to_pixels(tweedie_mean(schedule, x, t, score_fn(x, t)))
    return finalize_imputation(x0_hat, request)


def timed_imputation(method: str, request: ImputationRequest, fn) -> ImputationResult:
    start = time.perf_counter()
    images = fn()
    elapsed = time.perf_counter() - start
    logger.info(f"Imputed {len(request)} images with {method} in {elapsed:.1f}s ({request.steps} steps)")
    return ImputationResult(images, method, request.seed, elapsed)


def _check_score(ckpt: ModelCheckpoint | None, space: str, method: str):
    if ckpt is None or ckpt.kind != "score" or ckpt.metadata.get("space") != space:
        raise MethodModelMismatch(f"method '{method}' needs a {space}-space score checkpoint")


def _check_image_shape(request: ImputationRequest, expected):
    if tuple(request.x_obs.image_shape) != tuple(expected):
        raise ShapeMismatch(f"model expects images shaped {tuple(expected)}, request holds {request.x_obs.image_shape}")


def replacement_impute(score_ckpt: ModelCheckpoint, request: ImputationRequest, device=None,
                       step_hook: GuidanceHook | None = None) -> ImputationResult:
    """Replacement imputation with a trained pixel-space score model."""
    from .score_model import load_score_model

    _check_score(score_ckpt, "pixel", request.method)
    model = load_score_model(score_ckpt, device)
    _check_image_shape(request, model.net_config.input_shape)
    device = next(model.parameters()).device
    return timed_imputation(request.method, request,
                            lambda: run_replacement(model, request, model.schedule, device, step_hook=step_hook))


def guided_impute_pixel(score_ckpt: ModelCheckpoint, request: ImputationRequest, device=None,
                        step_hook: GuidanceHook | None = None) -> ImputationResult:
    """Self-guided imputation with a trained pixel-space score model."""
    from .score_model import load_score_model

    _check_score(score_ckpt, "pixel", request.method)
    model = load_score_model(score_ckpt, device)
    _check_image_shape(request, model.net_config.input_shape)
    device = next(model.parameters()).device
    return timed_imputation(request.method, request, lambda: run_guided(
        model, request, model.schedule, model.net_config.input_shape, device=device, step_hook=step_hook))


def guided_impute_latent(vae_ckpt: ModelCheckpoint, latent_score_ckpt: ModelCheckpoint,
                         request: ImputationRequest, device=None,
                         step_hook: GuidanceHook | None = None) -> ImputationResult:
    """
    Self-guided imputation in the scaled VAE latent space.

    The guidance loss is evaluated on decode(z0_hat / scale) in pixel space and
    differentiated through the decoder back to z_t.
    """
    from .score_model import load_score_model
    from .vae import IMAGE_SHAPE, decode, load_vae

    if vae_ckpt is None or vae_ckpt.kind != "vae":
        raise MethodModelMismatch(f"method '{request.method}' needs a VAE checkpoint")
    _check_image_shape(request, IMAGE_SHAPE)
    _check_score(latent_score_ckpt, "latent", request.method)
    vae_model = load_vae(vae_ckpt, device)
    model = load_score_model(latent_score_ckpt, device)
    device = next(model.parameters()).device
    scale = float(vae_ckpt.metadata["latent_scale"])
    return timed_imputation(request.method, request, lambda: run_guided(
        model, request, model.schedule, model.net_config.input_shape,
        to_pixels=lambda z: decode(vae_model, z / scale), device=device, step_hook=step_hook))


def autoencoder_impute(vae_ckpt: ModelCheckpoint, request: ImputationRequest, device=None) -> ImputationResult:
    """Decode the encoder mean of each zero-imputed image and clamp observed pixels."""
    from .vae import load_vae, reconstruct

    if vae_ckpt is None or vae_ckpt.kind != "vae":
        raise MethodModelMismatch(f"method '{request.method}' needs a VAE checkpoint")
    model = load_vae(vae_ckpt, device)

    def run():
        recon = reconstruct(model, request.x_obs, request.mask.masks)
        return finalize_imputation(torch.from_numpy(recon), request)

    return timed_imputation(request.method, request, run)


def batch_seed(seed: int, index: int) -> int:
    """Seed of batch `index` of a run seeded with `seed`; independent of batching order."""
    return int(seed) * 1_000_003 + index


def _complete_split(images: ImageBatch, role: str = "train") -> DatasetSplit:
    ones = np.ones(images.data.shape, dtype=np.uint8)
    return DatasetSplit(images, MaskSet(ones, 0.0, 0), role)


def _replacement_e_step(ckpt: ModelCheckpoint, request: ImputationRequest, batch_size: int,
                        device=None) -> ImputationResult:
    from .score_model import load_score_model

    _check_score(ckpt, "pixel", request.method)
    model = load_score_model(ckpt, device)
    _check_image_shape(request, model.net_config.input_shape)
    device = next(model.parameters()).device

    def run():
        parts = []
        for index, start in enumerate(range(0, len(request), batch_size)):
            part = request.subset(slice(start, start + batch_size))
            part.seed = batch_seed(request.seed, index)
            parts.append(run_replacement(model, part, model.schedule, device).data)
        return ImageBatch(np.concatenate(parts), request.x_obs.labels)

    return timed_imputation(request.method, request, run)


def em_impute_train(initial_score_ckpt: ModelCheckpoint, dataset: DatasetSplit, rounds: int, *,
                    steps: int, seed: int, epochs_per_round: int, batch_size: int = 500, device=None, console=None,
                    on_round: Callable[[int, ModelCheckpoint, ImputationResult], None] | None = None
                    ) -> tuple[ModelCheckpoint, ImputationResult]:
    """
    Alternate replacement imputation of the training set with retraining on it.

    Each round runs an E-step (replacement-impute every training image's
    missing pixels with the current model) and an M-step (warm-started
    training with the full loss on the completed images).

    Args:
        initial_score_ckpt: Pixel-space score model trained on the incomplete data
        dataset: Training split with its persistent masks
        rounds: Number of E/M rounds, >= 1
        steps: Reverse-diffusion steps per E-step
        seed: Base seed; round r uses seed + r for imputation
        epochs_per_round: Training epochs per M-step
        batch_size: Images per E-step imputation batch
        device: Torch device name
        console: Rich console for progress output
        on_round: Called with (round index, checkpoint, E-step result) after each round

    Returns:
        tuple: Final checkpoint and the last E-step's training-set imputations

    Raises:
        LatentFillError: Any training or imputation error, its message prefixed with the round
    """
    from .score_model import ScoreNetConfig, TrainConfig, train_score
    from .sde import DiffusionSchedule

    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    _check_score(initial_score_ckpt, "pixel", "em")
    ckpt = initial_score_ckpt
    net_config = ScoreNetConfig(**ckpt.metadata["net_config"])
    schedule = DiffusionSchedule(**ckpt.metadata["schedule"])
    train_config = TrainConfig(**{**ckpt.metadata["train_config"], "epochs": epochs_per_round})
    x_obs = dataset.zero_imputed()
    result = None
    for round_index in range(rounds):
        try:
            request = ImputationRequest(x_obs, dataset.masks, steps, seed + round_index, "em")
            if dataset.masks.masks.all():
                result = ImputationResult(x_obs, "em", request.seed)
            else:
                result = _replacement_e_step(ckpt, request, batch_size, device)
            ckpt = train_score(train_config, net_config, _complete_split(result.x_imputed), "full",
                               schedule, init_checkpoint=ckpt, device=device, console=console)
        except LatentFillError as exc:
            exc.args = (f"EM round {round_index + 1}/{rounds}: {exc}", *exc.args[1:])
            exc.em_round = round_index + 1
            raise
        ckpt.metadata.update({"em_round": round_index + 1, "em_rounds": rounds,
                              "missing_rate": dataset.masks.rate})
        logger.info(f"EM round {round_index + 1}/{rounds} done, loss={ckpt.metadata['loss_trace'][-1:]}")
        if console is not None:
            console.print(f"[green]EM round {round_index + 1}/{rounds} complete[/green]")
        if on_round is not None:
            on_round(round_index, ckpt, result)
    return ckpt, result


def save_image_grid(images: ImageBatch, path: str, nrow: int = 10, limit: int = 100):
    """Write the first `limit` images as a PNG grid."""
    from torchvision.utils import save_image

    tensor = torch.from_numpy(images.data[:limit])
    save_image(tensor, path, nrow=nrow, padding=2, pad_value=1.0)
    logger.info(f"Saved image grid of {tensor.shape[0]} images to {path}")

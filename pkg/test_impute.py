#!/usr/bin/env python3
"""
Tests for imputation: guidance rescaling, clamping, replacement and guided
sampling against Gaussian conditionals, the imputer registry and EM.
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '.'))

import numpy as np
import pytest
import torch

from latentfill import impute, score_model, vae
from latentfill.checkpoint import ModelCheckpoint
from latentfill.data import DatasetSplit, ImageBatch, MaskSet
from latentfill.errors import MethodModelMismatch, ShapeMismatch
from latentfill.imputer_manager import ImputerManager, method_for_model
from latentfill.imputers.base import METHODS, ImputationRequest
from latentfill.sde import DiffusionSchedule, analytic_gaussian_score, sample_unconditional

SCHEDULE = DiffusionSchedule()
MEAN = torch.tensor([0.5, 0.5], dtype=torch.float64)
COV = torch.tensor([[0.01, 0.008], [0.008, 0.01]], dtype=torch.float64)
X1 = 0.6
# E[x2 | x1] = mu2 + cov21 / cov11 * (x1 - mu1)
CONDITIONAL_MEAN = 0.5 + 0.8 * (X1 - 0.5)


def _image_score(mean=MEAN, cov=COV):
    """Analytic Gaussian score on flat vectors, applied to [B, 2, 1, 1] images."""
    flat = analytic_gaussian_score(SCHEDULE, mean, cov)

    def score_fn(x, t):
        return flat(x.reshape(x.shape[0], -1), t).reshape(x.shape)

    return score_fn


def _toy_request(n, observed=(1, 0), seed=0, method="replacement"):
    x = np.tile(np.array([X1, 0.0], dtype=np.float32).reshape(1, 2, 1, 1), (n, 1, 1, 1))
    masks = np.tile(np.array(observed, dtype=np.uint8).reshape(1, 2, 1, 1), (n, 1, 1, 1))
    x = x * masks
    return ImputationRequest(ImageBatch(x), MaskSet(masks, 0.5, seed), steps=1000, seed=seed, method=method)


def test_guidance_direction_matches_score_norm():
    score = torch.tensor([[3.0, 4.0], [1.0, 0.0]])
    grad = torch.tensor([[0.0, 0.5], [-2.0, 2.0]])
    out = impute.guidance_direction(score, grad)
    assert torch.allclose(out.norm(dim=1), score.norm(dim=1), atol=1e-6)
    assert torch.allclose(out[0], torch.tensor([0.0, 5.0]))


def test_guidance_direction_colinear_and_zero():
    score = torch.randn(3, 1, 4, 4)
    assert torch.allclose(impute.guidance_direction(score, 2.0 * score), score, atol=1e-6)
    zero = impute.guidance_direction(score, torch.zeros_like(score))
    assert torch.equal(zero, torch.zeros_like(score))
    with pytest.raises(ValueError):
        impute.guidance_direction(score, torch.zeros(3, 1, 2, 2))


def test_finalize_clamps_observed_pixels():
    """Observed pixels come back bit-identical; imputed ones are clipped to [0, 1]."""
    rng = np.random.default_rng(0)
    x = rng.random((2, 1, 28, 28)).astype(np.float32)
    masks = (rng.random((2, 1, 28, 28)) > 0.5).astype(np.uint8)
    request = ImputationRequest(ImageBatch(x * masks), MaskSet(masks, 0.5, 0), steps=1, seed=0)
    raw = torch.from_numpy(rng.normal(0.5, 2.0, size=(2, 1, 28, 28)))
    out = impute.finalize_imputation(raw, request).data
    observed = masks.astype(bool)
    assert np.array_equal(out[observed], (x * masks)[observed])
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_nothing_observed_equals_unconditional_sampling():
    """With an all-zero mask both samplers reproduce the unconditional sampler."""
    request = _toy_request(16, observed=(0, 0), seed=3)
    request.steps = 50
    score_fn = _image_score()
    expected = sample_unconditional(score_fn, (16, 2, 1, 1), SCHEDULE, seed=3, num_steps=50,
                                    denoise_final=True)
    expected = np.clip(expected.numpy(), 0.0, 1.0)
    replaced = impute.run_replacement(score_fn, request, SCHEDULE).data
    guided = impute.run_guided(score_fn, request, SCHEDULE, (2, 1, 1)).data
    np.testing.assert_allclose(replaced, expected, atol=1e-6)
    np.testing.assert_allclose(guided, expected, atol=1e-6)


def test_replacement_recovers_gaussian_conditional():
    """Observed x1 = 0.6: the imputed x2 averages to the analytic conditional mean."""
    request = _toy_request(10_000, seed=1)
    out = impute.run_replacement(_image_score(), request, SCHEDULE, dtype=torch.float64).data
    assert np.all(out[:, 0, 0, 0] == np.float32(X1))
    assert abs(out[:, 1, 0, 0].mean() - CONDITIONAL_MEAN) < 0.05 * CONDITIONAL_MEAN


def test_pixel_guidance_recovers_gaussian_conditional():
    request = _toy_request(4000, seed=2, method="guidance_pixel")
    request.steps = 500
    out = impute.run_guided(_image_score(), request, SCHEDULE, (2, 1, 1), dtype=torch.float64).data
    assert np.all(out[:, 0, 0, 0] == np.float32(X1))
    assert abs(out[:, 1, 0, 0].mean() - CONDITIONAL_MEAN) < 0.10 * CONDITIONAL_MEAN


def test_guidance_norm_invariant_every_step():
    """At every step the applied guidance has the score's norm, or both are zero."""
    request = _toy_request(64, seed=4, method="guidance_pixel")
    request.steps = 40
    seen = []

    def hook(step, t, score, guidance):
        score_norm = score.flatten(1).norm(dim=1)
        guidance_norm = guidance.flatten(1).norm(dim=1)
        nonzero = guidance_norm > 0
        assert torch.allclose(guidance_norm[nonzero], score_norm[nonzero], rtol=1e-6, atol=1e-9)
        seen.append(step)

    impute.run_guided(_image_score(), request, SCHEDULE, (2, 1, 1), dtype=torch.float64, step_hook=hook)
    assert seen == list(range(40))


def test_imputation_is_seeded():
    request = _toy_request(32, seed=9)
    request.steps = 30
    a = impute.run_replacement(_image_score(), request, SCHEDULE).data
    b = impute.run_replacement(_image_score(), request, SCHEDULE).data
    assert np.array_equal(a, b)


def test_request_validation():
    with pytest.raises(ValueError):
        _toy_request(2, method="inpaint")
    x = ImageBatch(np.zeros((2, 1, 28, 28)))
    with pytest.raises(ShapeMismatch):
        ImputationRequest(x, MaskSet(np.ones((2, 1, 14, 14)), 0.0, 0), steps=10, seed=0)
    with pytest.raises(ValueError):
        ImputationRequest(x, MaskSet(np.ones((2, 1, 28, 28)), 0.0, 0), steps=0, seed=0)


def test_manager_discovers_every_method():
    manager = ImputerManager()
    assert manager.get_available_methods() == sorted(METHODS)
    assert manager.create_imputer("guidance_latent").space == "latent"
    assert method_for_model("ldm") == "guidance_latent"
    with pytest.raises(MethodModelMismatch):
        manager.create_imputer("nearest_neighbour")


def test_method_model_mismatch():
    manager = ImputerManager()
    request = _toy_request(2)
    pixel_score = ModelCheckpoint("score", {"space": "pixel"})
    latent_score = ModelCheckpoint("score", {"space": "latent"})
    vae_ckpt = ModelCheckpoint("vae", {})
    with pytest.raises(MethodModelMismatch):
        manager.create_imputer("replacement").impute(request, None)
    with pytest.raises(MethodModelMismatch):
        manager.create_imputer("guidance_pixel").impute(request, latent_score)
    with pytest.raises(MethodModelMismatch):
        manager.create_imputer("guidance_latent").impute(request, pixel_score, vae_ckpt)
    with pytest.raises(MethodModelMismatch):
        manager.create_imputer("guidance_latent").impute(request, latent_score, None)
    with pytest.raises(MethodModelMismatch):
        manager.create_imputer("autoencoder").impute(request, None, pixel_score)


def _tiny_latent_models():
    torch.manual_seed(0)
    vae_config = vae.VaeConfig(base_channels=8, norm_groups=4)
    vae_ckpt = ModelCheckpoint.from_module("vae", vae.VAE(vae_config), {
        "vae_config": vae_config.to_dict(), "latent_scale": 1.7,
    })
    net_config = score_model.ScoreNetConfig(base_channels=8, channel_multipliers=[1, 2], blocks_per_resolution=1,
                                            attention_resolutions=[7], dropout=0.0, norm_groups=4,
                                            input_shape=(2, 7, 7))
    model = score_model.ScoreModel(net_config, DiffusionSchedule(num_steps=5))
    score_ckpt = ModelCheckpoint.from_module("score", model, {
        "space": "latent", "net_config": net_config.to_dict(), "schedule": model.schedule.to_dict(),
    })
    return vae_ckpt, score_ckpt


def _digit_request(method, steps=4):
    rng = np.random.default_rng(5)
    x = rng.random((3, 1, 28, 28)).astype(np.float32)
    masks = (rng.random((3, 1, 28, 28)) > 0.5).astype(np.uint8)
    return ImputationRequest(ImageBatch(x * masks), MaskSet(masks, 0.5, 5), steps=steps, seed=5, method=method)


def test_latent_guidance_end_to_end():
    """Latent guidance runs through the decoder and keeps observed pixels."""
    vae_ckpt, score_ckpt = _tiny_latent_models()
    request = _digit_request("guidance_latent")
    norms = []

    def hook(step, t, score, guidance):
        norms.append((score.flatten(1).norm(dim=1), guidance.flatten(1).norm(dim=1)))

    imputer = ImputerManager().create_imputer("guidance_latent", device="cpu")
    result = imputer.impute(request, score_ckpt, vae_ckpt, step_hook=hook)
    out = result.x_imputed.data
    observed = request.mask.masks.astype(bool)
    assert out.shape == (3, 1, 28, 28)
    assert np.array_equal(out[observed], request.x_obs.data[observed])
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert len(norms) == 4
    for score_norm, guidance_norm in norms:
        assert torch.allclose(score_norm, guidance_norm, rtol=1e-4)
    assert result.method == "guidance_latent"
    assert result.wall_time > 0


def test_latent_guidance_with_nothing_observed_is_decoded_sampling():
    """All-zero mask: latent guidance reproduces unconditional latent sampling followed by decoding."""
    from latentfill.score_model import load_score_model

    vae_ckpt, score_ckpt = _tiny_latent_models()
    request = _digit_request("guidance_latent", steps=5)
    request = ImputationRequest(ImageBatch(np.zeros_like(request.x_obs.data)),
                                MaskSet(np.zeros_like(request.mask.masks), 1.0, 5), steps=5, seed=5,
                                method="guidance_latent")
    result = impute.guided_impute_latent(vae_ckpt, score_ckpt, request, device="cpu")

    model = load_score_model(score_ckpt, "cpu")
    decoder = vae.load_vae(vae_ckpt, "cpu")
    z = sample_unconditional(model, (3, 2, 7, 7), model.schedule, seed=5, num_steps=5, denoise_final=True)
    with torch.no_grad():
        expected = np.clip(vae.decode(decoder, z / 1.7).numpy(), 0.0, 1.0)
    np.testing.assert_allclose(result.x_imputed.data, expected, atol=1e-5)


def test_autoencoder_baseline():
    vae_ckpt, _ = _tiny_latent_models()
    request = _digit_request("autoencoder")
    result = ImputerManager().create_imputer("autoencoder", device="cpu").impute(request, None, vae_ckpt)
    observed = request.mask.masks.astype(bool)
    assert np.array_equal(result.x_imputed.data[observed], request.x_obs.data[observed])


def _toy_split(n=128):
    rng = np.random.default_rng(0)
    points = np.clip(rng.multivariate_normal(MEAN.numpy(), COV.numpy(), size=n), 0.0, 1.0)
    images = ImageBatch(points.reshape(n, 2, 1, 1).astype(np.float32))
    masks = np.zeros((n, 2, 1, 1), dtype=np.uint8)
    masks[:, 0] = 1
    masks[::2] = 1
    return DatasetSplit(images, MaskSet(masks, 0.25, 0))


def _mlp_config():
    return score_model.ScoreNetConfig(base_channels=16, channel_multipliers=[2], blocks_per_resolution=1,
                                      dropout=0.0, input_shape=(2, 1, 1), architecture="mlp")


def test_em_rounds():
    """Two EM rounds impute the training set and retrain from the previous round."""
    split = _toy_split()
    train_config = score_model.TrainConfig(batch_size=32, epochs=2, learning_rate=1e-3, seed=0)
    initial = score_model.train_score(train_config, _mlp_config(), split, device="cpu")
    rounds = []
    ckpt, result = impute.em_impute_train(initial, split, 2, steps=10, seed=7, epochs_per_round=1,
                                          device="cpu", on_round=lambda r, c, res: rounds.append(r))
    assert rounds == [0, 1]
    assert ckpt.metadata["em_round"] == 2
    assert ckpt.metadata["loss_kind"] == "full"
    assert len(ckpt.metadata["loss_trace"]) == 1
    observed = split.masks.masks.astype(bool)
    assert np.array_equal(result.x_imputed.data[observed], split.images.data[observed])
    assert result.seed == 8


def test_em_error_names_the_round():
    split = _toy_split()
    train_config = score_model.TrainConfig(batch_size=32, epochs=1, learning_rate=1e-3, seed=0)
    initial = score_model.train_score(train_config, _mlp_config(), split, device="cpu")
    wrong = DatasetSplit(ImageBatch(np.full((4, 1, 2, 1), 0.5, dtype=np.float32)),
                         MaskSet(np.tile(np.array([1, 0], dtype=np.uint8).reshape(1, 1, 2, 1), (4, 1, 1, 1)), 0.5, 0))
    with pytest.raises(ShapeMismatch) as excinfo:
        impute.em_impute_train(initial, wrong, 2, steps=5, seed=0, epochs_per_round=1, device="cpu")
    assert excinfo.value.em_round == 1
    assert "EM round 1/2" in str(excinfo.value)


def test_em_second_round_imputes_closer_to_the_conditional():
    """From an untrained start, round-2 imputations of x2 sit closer to E[x2 | x1] than round-1 ones."""
    n = 256
    rng = np.random.default_rng(1)
    points = np.clip(rng.multivariate_normal(MEAN.numpy(), COV.numpy(), size=n), 0.0, 1.0)
    masks = np.ones((n, 2, 1, 1), dtype=np.uint8)
    masks[1::4, 1] = 0
    split = DatasetSplit(ImageBatch(points.reshape(n, 2, 1, 1).astype(np.float32)), MaskSet(masks, 0.125, 1))
    train_config = score_model.TrainConfig(batch_size=32, epochs=0, learning_rate=2e-3, seed=0)
    initial = score_model.train_score(train_config, _mlp_config(), split, device="cpu")

    imputed = {}
    impute.em_impute_train(initial, split, 2, steps=100, seed=3, epochs_per_round=60, device="cpu",
                           on_round=lambda r, c, res: imputed.__setitem__(r, res.x_imputed.data))
    missing = masks[:, 1, 0, 0] == 0
    conditional = 0.5 + 0.8 * (points[missing, 0] - 0.5)

    def error(images):
        return float(np.mean((images[missing, 1, 0, 0] - conditional) ** 2))

    assert error(imputed[1]) <= error(imputed[0])


if __name__ == "__main__":
    print("Testing guidance helpers...")
    test_guidance_direction_matches_score_norm()
    test_guidance_direction_colinear_and_zero()
    test_finalize_clamps_observed_pixels()
    print("Testing samplers against Gaussian conditionals...")
    test_nothing_observed_equals_unconditional_sampling()
    test_replacement_recovers_gaussian_conditional()
    test_pixel_guidance_recovers_gaussian_conditional()
    test_guidance_norm_invariant_every_step()
    test_imputation_is_seeded()
    test_request_validation()
    print("Testing imputers...")
    test_manager_discovers_every_method()
    test_method_model_mismatch()
    test_latent_guidance_end_to_end()
    test_latent_guidance_with_nothing_observed_is_decoded_sampling()
    test_autoencoder_baseline()
    print("Testing EM...")
    test_em_rounds()
    test_em_error_names_the_round()
    test_em_second_round_imputes_closer_to_the_conditional()
    print("✅ All imputation tests passed")

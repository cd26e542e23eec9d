"""Configuration settings for latentfill."""

import math
import os
from platformdirs import user_data_dir, user_cache_dir, user_log_dir

# VP SDE noise schedule
BETA_MIN = 0.1
BETA_MAX = 20.0
TAU = 1e-3  # Minimum time, keeps sigma(t) away from zero
NUM_STEPS = 1000

# Training recipe (Adam with default moments, fixed learning rates)
BATCH_SIZE = 256
EPOCHS = 50
LR_PIXEL = 1.96e-5
LR_LATENT = 9.05e-5
LR_VAE = 1e-3
LR_CLASSIFIER = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CLASSIFIER_EPOCHS = 5

# Score network defaults per space and profile
PIXEL_NET = {
    "desk": {"base_channels": 24, "channel_multipliers": [1, 2], "blocks_per_resolution": 2,
             "attention_resolutions": [], "dropout": 0.12, "norm_groups": 8},
    "full": {"base_channels": 48, "channel_multipliers": [1, 2, 4], "blocks_per_resolution": 3,
              "attention_resolutions": [], "dropout": 0.12, "norm_groups": 16},
}
LATENT_NET = {
    "desk": {"base_channels": 32, "channel_multipliers": [1, 2], "blocks_per_resolution": 2,
             "attention_resolutions": [7], "dropout": 0.08, "norm_groups": 8},
    "full": {"base_channels": 64, "channel_multipliers": [1, 2], "blocks_per_resolution": 2,
              "attention_resolutions": [7], "dropout": 0.08, "norm_groups": 16},
}
SKIP_RESCALE = 1 / math.sqrt(2)
TIME_EMBEDDING_SCALE = 1000.0  # Continuous t in [tau, 1] mapped onto the discrete index range

# Autoencoder
VAE_CHANNEL_MULTIPLIERS = [1, 2, 4]
VAE_BASE_CHANNELS = 32
VAE_LATENT_CHANNELS = 2
VAE_LATENT_SPATIAL = (7, 7)
VAE_BETA_KL = 1e-6
LATENT_SCALE_SUBSET = 4096
LATENT_SCALE_MIN_SAMPLES = 256

# Missingness sweep
MISSING_RATES = [0.0, 0.1, 0.3, 0.5, 0.6, 0.8]
SEEDS = [42, 43, 44]
TEST_MISSING_RATE = 0.5
TEST_SEED_OFFSET = 1000  # Test masks use seed + offset, independent of training masks
MODELS = ["ddpm", "ldm", "em"]

# EM baseline
EM_ROUNDS = 2
EM_EPOCHS_PER_ROUND = 10

# Evaluation
NUM_EVAL_SAMPLES = 10000
NUM_EVAL_IMPUTATIONS = 10000

# Desk profile: shrinks the run so the whole sweep fits on one machine
DESK_PROFILE = {
    "epochs": 5,
    "vae_epochs": 5,
    "sample_steps": 250,
    "num_eval_samples": 1000,
    "num_eval_imputations": 500,
}

# Runtime directories
OUTPUT_ROOT = os.environ.get("LATENTFILL_OUTPUT_ROOT") or os.path.join(user_data_dir("latentfill"), "runs")
CACHE_DIR = user_cache_dir("latentfill")
LOG_DIR = user_log_dir("latentfill", appauthor=False)
MNIST_DIR = os.environ.get("LATENTFILL_MNIST_DIR")

# Torch device; LATENTFILL_DEVICE forces one (e.g. "cpu" for bit-exact reruns)
DEVICE = os.environ.get("LATENTFILL_DEVICE")

# Sweep workers (independent cells run concurrently)
SWEEP_WORKERS = 1

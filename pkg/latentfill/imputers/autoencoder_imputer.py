"""Autoencoder-only baseline: one encode/decode pass, no diffusion."""

from ..impute import autoencoder_impute
from .base import ImputerBase


class AutoencoderImputer(ImputerBase):
    @property
    def name(self) -> str:
        return "autoencoder"

    @property
    def requires_score(self) -> bool:
        return False

    @property
    def requires_vae(self) -> bool:
        return True

    def impute(self, request, score_ckpt=None, vae_ckpt=None, step_hook=None):
        self.check_models(score_ckpt, vae_ckpt)
        return autoencoder_impute(vae_ckpt, request, self.device)

"""Replacement sampling: observed dims are re-noised from the data at every step."""

from ..impute import replacement_impute
from .base import ImputerBase


class ReplacementImputer(ImputerBase):
    @property
    def name(self) -> str:
        return "replacement"

    def impute(self, request, score_ckpt=None, vae_ckpt=None, step_hook=None):
        self.check_models(score_ckpt, vae_ckpt)
        return replacement_impute(score_ckpt, request, self.device, step_hook)

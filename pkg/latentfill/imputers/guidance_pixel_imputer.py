"""Self-guidance in pixel space."""

from ..impute import guided_impute_pixel
from .base import ImputerBase


class GuidancePixelImputer(ImputerBase):
    @property
    def name(self) -> str:
        return "guidance_pixel"

    def impute(self, request, score_ckpt=None, vae_ckpt=None, step_hook=None):
        self.check_models(score_ckpt, vae_ckpt)
        return guided_impute_pixel(score_ckpt, request, self.device, step_hook)

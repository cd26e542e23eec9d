"""Self-guidance in the VAE latent space, with the guidance loss computed on decoded pixels."""

from ..impute import guided_impute_latent
from .base import ImputerBase


class GuidanceLatentImputer(ImputerBase):
    @property
    def name(self) -> str:
        return "guidance_latent"

    @property
    def space(self) -> str:
        return "latent"

    @property
    def requires_vae(self) -> bool:
        return True

    def impute(self, request, score_ckpt=None, vae_ckpt=None, step_hook=None):
        self.check_models(score_ckpt, vae_ckpt)
        return guided_impute_latent(vae_ckpt, score_ckpt, request, self.device, step_hook)

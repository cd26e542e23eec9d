"""Imputation with a score model retrained by EM; sampling itself is replacement."""

from ..impute import replacement_impute
from .base import ImputerBase


class EmImputer(ImputerBase):
    @property
    def name(self) -> str:
        return "em"

    def check_models(self, score_ckpt, vae_ckpt):
        super().check_models(score_ckpt, vae_ckpt)
        if "em_round" not in score_ckpt.metadata and self.console is not None:
            self.console.print("[yellow]Score checkpoint was not produced by EM training; using it as is[/yellow]")

    def impute(self, request, score_ckpt=None, vae_ckpt=None, step_hook=None):
        self.check_models(score_ckpt, vae_ckpt)
        return replacement_impute(score_ckpt, request, self.device, step_hook)

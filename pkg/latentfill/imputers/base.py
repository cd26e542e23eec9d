"""Abstract base class and request/result types for imputation methods."""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable

import torch
from rich.console import Console

from ..checkpoint import ModelCheckpoint
from ..data import ImageBatch, MaskSet
from ..errors import MethodModelMismatch, ShapeMismatch

METHODS = ("replacement", "guidance_pixel", "guidance_latent", "em", "autoencoder")

# hook(step_index, t, unconditional_score, applied_guidance)
GuidanceHook = Callable[[int, torch.Tensor, torch.Tensor, torch.Tensor], None]


@dataclass
class ImputationRequest:
    """
    Images to complete plus everything that determines the result.

    x_obs carries ground truth only at observed positions; values at missing
    positions are never read.
    """

    x_obs: ImageBatch
    mask: MaskSet
    steps: int
    seed: int
    method: str = "replacement"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.method not in METHODS:
            raise ValueError(f"Unknown imputation method '{self.method}'")
        if self.mask.masks.shape != self.x_obs.data.shape:
            raise ShapeMismatch(f"mask {self.mask.masks.shape} vs x_obs {self.x_obs.data.shape}")

    def __len__(self):
        return len(self.x_obs)

    def subset(self, indices) -> "ImputationRequest":
        return ImputationRequest(self.x_obs.subset(indices), self.mask.subset(indices),
                                 self.steps, self.seed, self.method)


@dataclass
class ImputationResult:
    """Completed images; observed positions are copied verbatim from the request."""

    x_imputed: ImageBatch
    method: str
    seed: int
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)


class ImputerBase(ABC):
    """
    Abstract base class for all imputation methods.

    Subclasses declare which checkpoints they need; check_models turns a
    missing or wrong checkpoint into MethodModelMismatch before any work starts.
    """

    def __init__(self, console: Console | None = None, device: str | None = None):
        """
        Initialize the imputer.

        Args:
            console: Rich console instance for user feedback
            device: Torch device name
        """
        self.console = console
        self.device = device

    @property
    @abstractmethod
    def name(self) -> str:
        """
        Get the method identifier used in requests and on the command line.

        Returns:
            str: Method name (e.g., 'replacement', 'guidance_latent')
        """
        pass

    @property
    def space(self) -> str:
        """Space the diffusion runs in: 'pixel' or 'latent'."""
        return "pixel"

    @property
    def requires_score(self) -> bool:
        return True

    @property
    def requires_vae(self) -> bool:
        return False

    def check_models(self, score_ckpt: ModelCheckpoint | None, vae_ckpt: ModelCheckpoint | None):
        """
        Raises:
            MethodModelMismatch: A needed checkpoint is absent or of the wrong kind or space
        """
        if self.requires_score:
            if score_ckpt is None or score_ckpt.kind != "score":
                raise MethodModelMismatch(f"method '{self.name}' needs a score checkpoint")
            space = score_ckpt.metadata.get("space")
            if space != self.space:
                raise MethodModelMismatch(
                    f"method '{self.name}' runs in {self.space} space, checkpoint is a {space} score model"
                )
        if self.requires_vae and (vae_ckpt is None or vae_ckpt.kind != "vae"):
            raise MethodModelMismatch(f"method '{self.name}' needs a VAE checkpoint")

    @abstractmethod
    def impute(self, request: ImputationRequest, score_ckpt: ModelCheckpoint | None = None,
               vae_ckpt: ModelCheckpoint | None = None, step_hook: GuidanceHook | None = None) -> ImputationResult:
        """
        Fill in the missing pixels of every image in the request.

        Args:
            request: Images, masks, number of steps and seed
            score_ckpt: Score model checkpoint (pixel or latent space)
            vae_ckpt: VAE checkpoint for latent-space methods
            step_hook: Optional per-step trajectory recorder

        Returns:
            ImputationResult: Completed images with observed pixels clamped
        """
        pass

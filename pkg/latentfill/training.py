"""Shared minibatch optimization loop (Adam with default moments, fixed learning rate)."""

import logging
import math
import threading
from contextlib import contextmanager
from typing import Callable

import torch
from rich.console import Console
from rich.progress import Progress

from . import config
from .errors import EmptyDataset, NonFiniteLoss

logger = logging.getLogger(__name__)

LossFn = Callable[[tuple[torch.Tensor, ...], torch.Generator], torch.Tensor]

_GLOBAL_RNG_LOCK = threading.RLock()


@contextmanager
def seeded_global_rng(seed: int):
    """
    Hold torch's process-wide generator, seeded, for the duration of the block.

    Parameter init and dropout draw from that generator rather than an explicit
    one, so concurrent runs take turns. The previous state is restored on exit.
    """
    with _GLOBAL_RNG_LOCK, torch.random.fork_rng():
        torch.manual_seed(int(seed))
        yield


def make_optimizer(module: torch.nn.Module, learning_rate: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(module.parameters(), lr=learning_rate, betas=config.ADAM_BETAS, eps=config.ADAM_EPS)


def fit(module: torch.nn.Module, loss_fn: LossFn, arrays: tuple[torch.Tensor, ...], *,
        epochs: int, batch_size: int, learning_rate: float, seed: int,
        description: str = "Training", console: Console | None = None) -> list[float]:
    """
    Run epochs * ceil(N / batch_size) Adam steps over shuffled minibatches.

    Args:
        module: Network being optimized; switched to train mode for the run
        loss_fn: Called as loss_fn(batch_arrays, generator) -> scalar tensor
        arrays: Equal-length tensors indexed together per minibatch
        epochs: Number of passes over the data
        batch_size: Minibatch size
        learning_rate: Fixed Adam learning rate
        seed: Seeds the shuffling, the loss's noise stream and dropout
        description: Progress bar label
        console: When given, a rich progress bar is shown on it

    Returns:
        list[float]: Mean training loss per epoch

    Raises:
        EmptyDataset: No rows to train on
        NonFiniteLoss: The loss became NaN or infinite; carries the epoch index
    """
    n = arrays[0].shape[0]
    if n == 0:
        raise EmptyDataset(f"{description}: dataset is empty")
    device = next(module.parameters()).device
    generator = torch.Generator(device="cpu").manual_seed(int(seed))
    noise_generator = torch.Generator(device=device).manual_seed(int(seed) + 1)
    optimizer = make_optimizer(module, learning_rate)
    steps_per_epoch = math.ceil(n / batch_size)
    trace = []

    progress = Progress(console=console, transient=True, disable=console is None)
    with seeded_global_rng(int(seed) + 2), progress:
        task = progress.add_task(description, total=epochs * steps_per_epoch)
        module.train()
        for epoch in range(epochs):
            order = torch.randperm(n, generator=generator)
            total = 0.0
            for step in range(steps_per_epoch):
                idx = order[step * batch_size:(step + 1) * batch_size]
                batch = tuple(a[idx].to(device) for a in arrays)
                loss = loss_fn(batch, noise_generator)
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"{description}: loss became {loss.item()} in epoch {epoch}", epoch=epoch)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                total += loss.item() * idx.shape[0]
                progress.advance(task)
            trace.append(total / n)
            logger.info(f"{description}: epoch {epoch + 1}/{epochs} loss={trace[-1]:.6f}")
    module.eval()
    return trace


def resolve_device(device: str | None = None) -> torch.device:
    """Explicit argument, then LATENTFILL_DEVICE, then CUDA when available."""
    name = device or config.DEVICE or ("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)

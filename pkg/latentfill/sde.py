"""
Variance-preserving SDE with a linear beta schedule.

Closed-form marginals of the forward process, the Euler-Maruyama step of the
reverse-time SDE, Tweedie denoising and an unconditional sampler. Times are
continuous in [tau, 1]; all array arguments are torch tensors whose first
dimension is the batch.
"""

from dataclasses import dataclass, asdict
from typing import Callable

import torch

from . import config
from .errors import ShapeMismatch, TimeOutOfRange

ScoreFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
StepHook = Callable[[int, torch.Tensor, torch.Tensor], None]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta(t) = beta_min + t (beta_max - beta_min) on [tau, 1]."""

    beta_min: float = config.BETA_MIN
    beta_max: float = config.BETA_MAX
    tau: float = config.TAU
    num_steps: int = config.NUM_STEPS

    def __post_init__(self):
        if not 0 < self.beta_min < self.beta_max:
            raise ValueError(f"need 0 < beta_min < beta_max, got {self.beta_min}, {self.beta_max}")
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MarginalCoeffs:
    """Mean coefficient alpha(t) and standard deviation sigma(t) of p_0t(x_t | x_0)."""

    alpha: torch.Tensor
    sigma: torch.Tensor


def _as_time(t) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        return t
    return torch.tensor(float(t), dtype=torch.float64)


def _check_time(t: torch.Tensor, lower: float):
    # Grids built with linspace may land a hair outside the closed interval.
    if bool((t < lower - 1e-9).any()) or bool((t > 1.0 + 1e-9).any()):
        raise TimeOutOfRange(f"time {t.min().item():.6g}..{t.max().item():.6g} outside [{lower}, 1]")


def _broadcast(coeff: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Reshape a per-sample coefficient [B] (or a scalar) so it broadcasts against x."""
    coeff = coeff.to(device=x.device, dtype=x.dtype)
    if coeff.ndim == 0:
        return coeff
    return coeff.reshape(coeff.shape[0], *([1] * (x.ndim - 1)))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def beta(schedule: DiffusionSchedule, t) -> torch.Tensor:
    """Noise rate beta(t). The closed form is also defined at t = 0."""
    t = _as_time(t)
    _check_time(t, 0.0)
    return schedule.beta_min + t * (schedule.beta_max - schedule.beta_min)


def marginal_coeffs(schedule: DiffusionSchedule, t) -> MarginalCoeffs:
    """
    Coefficients of the Gaussian transition kernel at time t.

    alpha = exp(-1/2 * integral_0^t beta), sigma = sqrt(1 - alpha^2).
    """
    t = _as_time(t)
    _check_time(t, 0.0)
    log_alpha = -0.5 * (schedule.beta_min * t + 0.5 * t ** 2 * (schedule.beta_max - schedule.beta_min))
    alpha = torch.exp(log_alpha)
    sigma = torch.sqrt(-torch.expm1(2.0 * log_alpha))
    return MarginalCoeffs(alpha=alpha, sigma=sigma)


def forward_sample(schedule: DiffusionSchedule, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw x_t = alpha x0 + sigma eps."""
    _check_same_shape(x0, eps, "forward_sample eps")
    coeffs = marginal_coeffs(schedule, t)
    return _broadcast(coeffs.alpha, x0) * x0 + _broadcast(coeffs.sigma, x0) * eps


def score_target(schedule: DiffusionSchedule, xt: torch.Tensor, x0: torch.Tensor, t) -> torch.Tensor:
    """Conditional score grad log p_0t(x_t | x_0) = -(x_t - alpha x0) / sigma^2."""
    _check_same_shape(xt, x0, "score_target")
    t = _as_time(t)
    _check_time(t, schedule.tau)
    coeffs = marginal_coeffs(schedule, t)
    alpha, sigma = _broadcast(coeffs.alpha, xt), _broadcast(coeffs.sigma, xt)
    return -(xt - alpha * x0) / sigma ** 2


def reverse_step(schedule: DiffusionSchedule, x: torch.Tensor, t, dt: float,
                 score_val: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """
    One Euler-Maruyama step of the reverse-time SDE, from t down to t - dt.

    Args:
        schedule: Noise schedule
        x: Current state at time t
        t: Current time (scalar or per-sample)
        dt: Step magnitude, >= 0
        score_val: Score estimate at (x, t)
        noise: Standard normal draw shaped like x

    Returns:
        torch.Tensor: x - f_rev(x, t) dt + sqrt(beta dt) noise with
        f_rev = -1/2 beta x - beta score
    """
    _check_same_shape(x, score_val, "reverse_step score")
    _check_same_shape(x, noise, "reverse_step noise")
    if dt < 0:
        raise ValueError(f"dt is a step magnitude and must be >= 0, got {dt}")
    b = _broadcast(beta(schedule, t), x)
    drift = -0.5 * b * x - b * score_val
    return x - drift * dt + torch.sqrt(b * dt) * noise


def tweedie_mean(schedule: DiffusionSchedule, xt: torch.Tensor, t, score_val: torch.Tensor) -> torch.Tensor:
    """Posterior mean E[x_0 | x_t] = (x_t + sigma^2 score) / alpha."""
    _check_same_shape(xt, score_val, "tweedie_mean")
    t = _as_time(t)
    _check_time(t, schedule.tau)
    coeffs = marginal_coeffs(schedule, t)
    alpha, sigma = _broadcast(coeffs.alpha, xt), _broadcast(coeffs.sigma, xt)
    return (xt + sigma ** 2 * score_val) / alpha


def time_grid(schedule: DiffusionSchedule, num_steps: int | None = None) -> tuple[torch.Tensor, float]:
    """Uniform grid from t = 1 down to t = tau (num_steps + 1 points) and its step size."""
    n = num_steps or schedule.num_steps
    return torch.linspace(1.0, schedule.tau, n + 1, dtype=torch.float64), (1.0 - schedule.tau) / n


def batch_time(t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Repeat a scalar time for every sample in x."""
    return torch.full((x.shape[0],), float(t), dtype=x.dtype, device=x.device)


def make_generator(seed: int, device=None) -> torch.Generator:
    generator = torch.Generator(device=device or "cpu")
    generator.manual_seed(int(seed))
    return generator


def sample_unconditional(score_fn: ScoreFn, shape, schedule: DiffusionSchedule, seed: int,
                         num_steps: int | None = None, denoise_final: bool = False,
                         dtype=torch.float32, device=None,
                         step_hook: StepHook | None = None) -> torch.Tensor:
    """
    Draw samples by integrating the reverse SDE from the N(0, I) prior.

    Args:
        score_fn: Callable (x, t[B]) -> score shaped like x
        shape: Batch shape, e.g. (N, 1, 28, 28)
        schedule: Noise schedule
        seed: Seed of the prior draw and every step's noise
        num_steps: Number of reverse steps (defaults to schedule.num_steps)
        denoise_final: Replace the state at tau by its Tweedie mean
        step_hook: Called as hook(step_index, t, score) after every score evaluation

    Returns:
        torch.Tensor: Samples at t = tau
    """
    device = device or "cpu"
    generator = make_generator(seed, device)
    x = torch.randn(tuple(shape), generator=generator, dtype=dtype, device=device)
    ts, dt = time_grid(schedule, num_steps)
    with torch.no_grad():
        for i in range(len(ts) - 1):
            t = batch_time(ts[i], x)
            score = score_fn(x, t)
            if step_hook is not None:
                step_hook(i, t, score)
            noise = torch.randn(x.shape, generator=generator, dtype=dtype, device=device)
            x = reverse_step(schedule, x, t, dt, score, noise)
        if denoise_final:
            t = batch_time(ts[-1], x)
            x = tweedie_mean(schedule, x, t, score_fn(x, t))
    return x


def analytic_gaussian_score(schedule: DiffusionSchedule, mean: torch.Tensor, cov: torch.Tensor) -> ScoreFn:
    """
    Exact marginal score when the data distribution is N(mean, cov) over flat vectors.

    p_t = N(alpha mean, alpha^2 cov + sigma^2 I); the returned callable is
    differentiable in x, so it can stand in for a trained network anywhere.
    """
    dim = mean.shape[0]
    eye = torch.eye(dim, dtype=cov.dtype)

    def score_fn(x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        coeffs = marginal_coeffs(schedule, t)
        alpha = coeffs.alpha.to(x.dtype).reshape(-1, 1)
        sigma = coeffs.sigma.to(x.dtype).reshape(-1, 1)
        cov_t = alpha[:, :, None] ** 2 * cov.to(x.dtype) + sigma[:, :, None] ** 2 * eye.to(x.dtype)
        centered = (x - alpha * mean.to(x.dtype)).unsqueeze(-1)
        return -torch.linalg.solve(cov_t, centered).squeeze(-1)

    return score_fn

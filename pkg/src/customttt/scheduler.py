"""Diffusion-time math: linear noise schedule, forward noising, DDIM and CFG."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional

import numpy as np
import torch

if TYPE_CHECKING:
    from .model import PromptRouting


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alphas_cumprod: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def abar(self, t: int) -> float:
        """Cumulative product at schedule index ``t``; index -1 is the clean end (1.0)."""
        if t == -1:
            return 1.0
        if not 0 <= t < self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T})")
        return float(self.alphas_cumprod[t])


@dataclass
class DdimTrajectory:
    timesteps: list[int]
    latents: list[torch.Tensor] = field(default_factory=list)


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.05) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"need at least 2 diffusion steps, got T={T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alphas_cumprod=np.cumprod(alphas))


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(z0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    _check_same_shape(z0, eps, "q_sample")
    ab = sched.abar(t)
    return ab**0.5 * z0 + (1.0 - ab) ** 0.5 * eps


def q_sample_batch(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Per-item forward noising; ``t`` holds one schedule index per leading-axis item."""
    _check_same_shape(z0, eps, "q_sample_batch")
    ab = torch.as_tensor(sched.alphas_cumprod, dtype=z0.dtype)[t]
    shape = (-1,) + (1,) * (z0.dim() - 1)
    return ab.sqrt().view(shape) * z0 + (1.0 - ab).sqrt().view(shape) * eps


def ddim_step(
    z_t: torch.Tensor, eps_pred: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule
) -> torch.Tensor:
    """Deterministic (eta=0) DDIM update from ``t`` to ``t_prev``; ``t_prev=-1`` means fully denoised."""
    _check_same_shape(z_t, eps_pred, "ddim_step")
    if t_prev >= t:
        raise ValueError(f"ddim_step must move to a less noisy index, got {t} -> {t_prev}")
    ab_t = sched.abar(t)
    if ab_t <= 0.0:
        raise ValueError("cumulative alpha is zero; cannot invert")
    ab_prev = sched.abar(t_prev)
    z0_hat = (z_t - (1.0 - ab_t) ** 0.5 * eps_pred) / ab_t**0.5
    return ab_prev**0.5 * z0_hat + (1.0 - ab_prev) ** 0.5 * eps_pred


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """``eps_uncond + scale * (eps_cond - eps_uncond)``, written so scales 0 and 1 are exact."""
    _check_same_shape(eps_uncond, eps_cond, "cfg_combine")
    return (1.0 - scale) * eps_uncond + scale * eps_cond


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending grid starting at T-1, terminated by the virtual index -1."""
    if not 1 <= steps <= T:
        raise ValueError(f"sampling steps must lie in [1, {T}], got {steps}")
    grid = np.round(np.linspace(T - 1, 0, steps)).astype(int).tolist()
    return grid + [-1]


def initial_latent(shape: tuple[int, ...], seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)


def ddim_sample(
    model: Callable,
    routing: "PromptRouting",
    steps: int,
    cfg_scale: float,
    seed: int,
    sched: NoiseSchedule,
    stop_after: Optional[int] = None,
    adapters=None,
    uncond_routing: Optional["PromptRouting"] = None,
    record: bool = False,
) -> tuple[torch.Tensor, DdimTrajectory]:
    """Run ``steps`` DDIM steps from a seeded Gaussian latent.

    ``model`` is called as ``model(z, t, routing, adapters)``. With ``stop_after=f``
    the latent after exactly ``f`` steps is returned and the trajectory ends at the
    schedule index that latent sits at. When ``cfg_scale != 1`` an unconditional
    routing is required; both branches run as one batch of two.
    """
    grid = ddim_timesteps(sched.T, steps)
    if stop_after is None:
        stop_after = steps
    if not 0 <= stop_after <= steps:
        raise ValueError(f"stop_after must lie in [0, {steps}], got {stop_after}")
    use_cfg = cfg_scale != 1.0
    if use_cfg and uncond_routing is None:
        raise ValueError("classifier-free guidance needs an unconditional routing")

    z = initial_latent(model.video_shape, seed, dtype=model.dtype)
    traj = DdimTrajectory(timesteps=[grid[0]])
    if record:
        traj.latents.append(z)
    if use_cfg:
        both = routing.stack(uncond_routing)
    with torch.no_grad():
        for k in range(stop_after):
            t, t_prev = grid[k], grid[k + 1]
            if use_cfg:
                eps_u, eps_c = model(torch.stack([z, z]), t, both, adapters).unbind(0)
                eps = cfg_combine(eps_u, eps_c, cfg_scale)
            else:
                eps = model(z, t, routing, adapters)
            z = ddim_step(z, eps, t, t_prev, sched)
            traj.timesteps.append(t_prev)
            if record:
                traj.latents.append(z)
    return z, traj

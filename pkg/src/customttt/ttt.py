"""Test-time training of a combined appearance + motion adapter pair.

Each step draws a fresh reference latent from one single-concept teacher (the
base model with only the frozen appearance adapter, or only the frozen motion
adapter), partially denoises it for ``f`` DDIM steps, re-noises it one grid
step and regresses the combined model's noise prediction onto the injected
noise. Appearance steps use a plain MSE; motion steps compare anchor-debiased
noise so the shared per-frame content does not dominate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .data import NULL_PROMPT, Prompt, concept_prompt, embed_prompt
from .lora import LoraAdapter
from .model import Denoiser, PromptRouting
from .scheduler import NoiseSchedule, ddim_sample, ddim_timesteps, make_schedule
from .train import OptimizerState, adapter_tensor_names, lion_step

log = logging.getLogger(__name__)

POOL_BACKGROUNDS = (("in", "park"), ("in", "city"), ("in", "desert"), ("in", "studio"))


@dataclass
class TTTConfig:
    f: int = 5
    ttt_steps: int = 30
    lr: float = 1e-4
    beta_debias: float = 1.0
    anchor_index: int = 0
    sampling_steps: int = 25
    cfg_scale: float = 9.0
    appearance_prompt_pool: list[Prompt] = field(default_factory=list)
    motion_prompt_pool: list[Prompt] = field(default_factory=list)
    seed: int = 0
    renoise: str = "next_grid"  # or "random_higher"
    lion_beta1: float = 0.9
    lion_beta2: float = 0.99

    def validate(self, frames: int) -> None:
        if not 0 < self.f < self.sampling_steps:
            raise ValueError(f"f must satisfy 0 < f < sampling_steps ({self.sampling_steps}), got {self.f}")
        if self.ttt_steps < 0:
            raise ValueError("ttt_steps must be >= 0")
        if not 0 <= self.anchor_index < frames:
            raise ValueError(f"anchor_index must lie in [0, {frames})")
        if not self.appearance_prompt_pool or not self.motion_prompt_pool:
            raise ValueError("both prompt pools must be non-empty")
        if self.renoise not in ("next_grid", "random_higher"):
            raise ValueError(f"unknown renoise mode {self.renoise!r}")


def prompt_pool(appearance: Optional[int], motion: Optional[int]) -> list[Prompt]:
    """Four related prompts around one concept, varying only background tokens."""
    return [concept_prompt(appearance, motion, extra) for extra in POOL_BACKGROUNDS]


@dataclass
class ReferenceLatent:
    z: torch.Tensor
    t_f: int
    source_kind: str
    prompt: Prompt
    grid: list[int]
    f: int


def _routings(model: Denoiser, prompt: Prompt):
    d = model.config.embed_dim
    cond = PromptRouting.uniform(embed_prompt(prompt, d, dtype=model.dtype))
    uncond = PromptRouting.uniform(embed_prompt(NULL_PROMPT, d, dtype=model.dtype))
    return cond, uncond


def make_reference_latent(
    base: Denoiser,
    adapter: LoraAdapter,
    prompt: Prompt,
    f: int,
    sampling_steps: int = 25,
    cfg_scale: float = 9.0,
    seed: int = 0,
    sched: Optional[NoiseSchedule] = None,
    source_kind: Optional[str] = None,
) -> ReferenceLatent:
    """Latent after exactly ``f`` DDIM steps of the base model carrying only ``adapter``."""
    sched = sched or make_schedule()
    if source_kind is not None and source_kind != adapter.kind:
        raise ValueError(f"requested a {source_kind} reference from a {adapter.kind} adapter")
    if not 0 <= f <= sampling_steps:
        raise ValueError(f"f must lie in [0, {sampling_steps}], got {f}")
    cond, uncond = _routings(base, prompt)
    z, traj = ddim_sample(base, cond, sampling_steps, cfg_scale, seed, sched, stop_after=f,
                          adapters=[adapter], uncond_routing=uncond)
    return ReferenceLatent(z, traj.timesteps[-1], adapter.kind, prompt, ddim_timesteps(sched.T, sampling_steps), f)


def renoise(
    ref: ReferenceLatent,
    sched: NoiseSchedule,
    seed: int,
    eps: Optional[torch.Tensor] = None,
    mode: str = "next_grid",
) -> tuple[torch.Tensor, torch.Tensor, int]:
    """Treat ``ref.z`` as clean and noise it to the next-noisier grid index.

    Returns ``(z_noised, eps_used, t_star)``. ``eps`` overrides the seeded draw.
    """
    if ref.f == 0:
        raise ValueError("reference latent already sits at the noisiest grid index")
    gen = torch.Generator().manual_seed(int(seed))
    if mode == "next_grid":
        t_star = ref.grid[ref.f - 1]
    elif mode == "random_higher":
        t_star = int(torch.randint(ref.t_f + 1, sched.T, (1,), generator=gen))
    else:
        raise ValueError(f"unknown renoise mode {mode!r}")
    if eps is None:
        eps = torch.randn(ref.z.shape, generator=gen, dtype=torch.float64).to(ref.z.dtype)
    ab = sched.abar(t_star)
    return math.sqrt(ab) * ref.z + math.sqrt(1.0 - ab) * eps, eps, t_star


def phi_debias(eps_frames: torch.Tensor, anchor_index: int, beta: float) -> torch.Tensor:
    """Per frame ``sqrt(beta^2 + 1) * eps_i - beta * eps_anchor`` (frame axis is dim -4)."""
    frames = eps_frames.shape[-4]
    if not 0 <= anchor_index < frames:
        raise IndexError(f"anchor index {anchor_index} outside [0, {frames})")
    anchor = eps_frames.narrow(-4, anchor_index, 1)
    return math.sqrt(beta * beta + 1.0) * eps_frames - beta * anchor


def _check_frozen_base(model: Denoiser) -> None:
    if any(p.requires_grad for p in model.params.values()):
        raise RuntimeError("base weights are marked trainable; test-time training only updates adapter copies")


def _ap_loss(model, adapters, z_noised, eps_used, t_star, prompt) -> torch.Tensor:
    cond, _ = _routings(model, prompt)
    return ((model(z_noised, t_star, cond, adapters) - eps_used) ** 2).mean()


def _tp_loss(model, adapters, z_noised, eps_used, t_star, prompt, anchor_index, beta) -> torch.Tensor:
    cond, _ = _routings(model, prompt)
    pred = model(z_noised, t_star, cond, adapters)
    return ((phi_debias(eps_used, anchor_index, beta) - phi_debias(pred, anchor_index, beta)) ** 2).mean()


def _with_grads(loss_fn, model, adapters, *args):
    _check_frozen_base(model)
    tensors = [t for ad in adapters for t in ad.tensors]
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad_(True)
    try:
        loss = loss_fn(model, adapters, *args)
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    finally:
        for t, fl in zip(tensors, flags):
            t.requires_grad_(fl)
    grads = [g if g is not None else torch.zeros_like(t) for t, g in zip(tensors, grads)]
    return float(loss.detach()), dict(zip(adapter_tensor_names(adapters), grads))


def appearance_preservation_loss(model, adapters, z_noised, eps_used, t_star, prompt) -> tuple[float, dict]:
    """MSE between the combined model's noise prediction and the injected noise, with adapter gradients."""
    return _with_grads(_ap_loss, model, adapters, z_noised, eps_used, t_star, prompt)


def temporal_preservation_loss(model, adapters, z_noised, eps_used, t_star, prompt, anchor_index=0, beta=1.0) -> tuple[float, dict]:
    """Anchor-debiased MSE between injected and predicted noise, with adapter gradients."""
    return _with_grads(_tp_loss, model, adapters, z_noised, eps_used, t_star, prompt, anchor_index, beta)


@dataclass
class TTTResult:
    appearance: LoraAdapter
    motion: LoraAdapter
    curve: list[tuple[int, str, float]]

    def to_csv(self) -> str:
        return "step,which_loss,value\n" + "".join(f"{s},{w},{v:.8g}\n" for s, w, v in self.curve)


def _step_seed(seed: int, step: int, salt: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(step), salt]).generate_state(1)[0])


def run_ttt(
    base: Denoiser,
    lora_s: LoraAdapter,
    lora_t: LoraAdapter,
    cfg: TTTConfig,
    sched: Optional[NoiseSchedule] = None,
    progress=None,
) -> TTTResult:
    """Alternate appearance (odd steps) and motion (even steps) preservation updates on adapter copies."""
    sched = sched or make_schedule()
    if lora_s.kind != "appearance" or lora_t.kind != "motion":
        raise ValueError(f"expected (appearance, motion) adapters, got ({lora_s.kind}, {lora_t.kind})")
    cfg.validate(base.config.frames)
    _check_frozen_base(base)
    teacher_s, teacher_t = lora_s.copy(), lora_t.copy()
    student_s, student_t = lora_s.copy(), lora_t.copy()
    students = [student_s, student_t]
    tensors = [t for ad in students for t in ad.tensors]
    state = OptimizerState.zeros_like(tensors)
    rng = np.random.default_rng([int(cfg.seed), 0x77])
    curve: list[tuple[int, str, float]] = []

    for k in range(1, cfg.ttt_steps + 1):
        appearance_step = k % 2 == 1
        pool = cfg.appearance_prompt_pool if appearance_step else cfg.motion_prompt_pool
        prompt = pool[int(rng.integers(len(pool)))]
        teacher = teacher_s if appearance_step else teacher_t
        ref = make_reference_latent(base, teacher, prompt, cfg.f, cfg.sampling_steps, cfg.cfg_scale,
                                    seed=_step_seed(cfg.seed, k, 1), sched=sched)
        z_noised, eps_used, t_star = renoise(ref, sched, _step_seed(cfg.seed, k, 2), mode=cfg.renoise)
        for t in tensors:
            t.requires_grad_(True)
        if appearance_step:
            loss = _ap_loss(base, students, z_noised, eps_used, t_star, prompt)
        else:
            loss = _tp_loss(base, students, z_noised, eps_used, t_star, prompt, cfg.anchor_index, cfg.beta_debias)
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
        for t in tensors:
            t.requires_grad_(False)
        grads = [g if g is not None else torch.zeros_like(t) for t, g in zip(tensors, grads)]
        lion_step(tensors, grads, state, cfg.lr, cfg.lion_beta1, cfg.lion_beta2)
        which = "appearance" if appearance_step else "temporal"
        curve.append((k, which, float(loss.detach())))
        if progress is not None:
            progress(k, which, curve[-1][2])
    for ad in students:
        ad.meta.update(ttt_steps=cfg.ttt_steps, ttt_lr=cfg.lr, ttt_f=cfg.f)
    return TTTResult(student_s, student_t, curve)

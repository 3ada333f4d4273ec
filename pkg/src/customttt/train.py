"""Noise-prediction training: LION/SGD updates, base pretraining and single-concept LoRA fitting."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data import NULL_PROMPT, Corpus, Prompt, embed_prompt
from .lora import LoraAdapter, init_adapter
from .model import Denoiser, PromptRouting
from .scheduler import NoiseSchedule, make_schedule, q_sample_batch

log = logging.getLogger(__name__)

# paper learning rates for the two LoRA kinds; temporal is 5x spatial
SPATIAL_LORA_LR = 1e-5
TEMPORAL_LORA_LR = 5e-5


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 6000
    lr: float = 3e-4
    batch: int = 4
    optimizer: str = "lion"
    lion_beta1: float = 0.9
    lion_beta2: float = 0.99
    weight_decay: float = 0.0
    cond_drop_prob: float = 0.1
    seed: int = 0
    lr_decay: str = "cosine"  # to zero at the last step, or "none"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise ValueError("cond_drop_prob must lie in [0, 1]")
        if self.optimizer not in ("lion", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")

    def lr_at(self, step: int) -> float:
        if self.lr_decay == "none":
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / self.steps))


def appearance_lora_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(steps=500, lr=SPATIAL_LORA_LR, cond_drop_prob=0.0), **overrides)


def motion_lora_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(steps=500, lr=TEMPORAL_LORA_LR, cond_drop_prob=0.0), **overrides)


@dataclass
class OptimizerState:
    momentum: list[torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "OptimizerState":
        return cls([torch.zeros_like(p, requires_grad=False) for p in params])


def lion_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    weight_decay: float = 0.0,
) -> None:
    """In-place LION update: ``p -= lr * (sign(b1*m + (1-b1)*g) + wd*p)``, then ``m = b2*m + (1-b2)*g``."""
    if not (len(params) == len(grads) == len(state.momentum)):
        raise ValueError("params, grads and momentum must have the same length")
    with torch.no_grad():
        for p, g, m in zip(params, grads, state.momentum):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}, momentum {tuple(m.shape)}")
            c = beta1 * m + (1.0 - beta1) * g
            p.sub_(lr * (torch.sign(c) + weight_decay * p))
            m.mul_(beta2).add_((1.0 - beta2) * g)
    state.step += 1


def sgd_step(params, grads, state: OptimizerState, lr: float, weight_decay: float = 0.0) -> None:
    with torch.no_grad():
        for p, g in zip(params, grads):
            p.sub_(lr * (g + weight_decay * p))
    state.step += 1


def _optimizer_step(cfg: TrainConfig, params, grads, state) -> None:
    lr = cfg.lr_at(state.step)
    if cfg.optimizer == "lion":
        lion_step(params, grads, state, lr, cfg.lion_beta1, cfg.lion_beta2, cfg.weight_decay)
    else:
        sgd_step(params, grads, state, lr, cfg.weight_decay)


def adapter_tensor_names(adapters: Sequence[LoraAdapter]) -> list[str]:
    return [f"{ad.kind}:{e.target.key}.{f}" for ad in adapters for e in ad.entries for f in ("A", "B")]


def _trainable(model, adapters) -> tuple[list[str], list[torch.Tensor]]:
    if adapters is not None:
        tensors = [t for ad in adapters for t in ad.tensors]
        names = adapter_tensor_names(adapters)
    else:
        names = list(model.params)
        tensors = [model.params[n] for n in names]
    if not tensors:
        raise ValueError("nothing to train: the trainable set is empty")
    return names, tensors


def noise_draws(shape: tuple[int, ...], T: int, gen: torch.Generator, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """One uniform timestep per item and a matching Gaussian noise tensor."""
    t = torch.randint(0, T, (shape[0],), generator=gen)
    eps = torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)
    return t, eps


def eps_mse(model, adapters, z0: torch.Tensor, routing, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    z_t = q_sample_batch(z0, t, eps, sched)
    pred = model(z_t, t, routing, adapters)
    return ((eps - pred) ** 2).mean()


def diffusion_loss(
    model,
    adapters: Optional[Sequence[LoraAdapter]],
    z0: torch.Tensor,
    routing: PromptRouting,
    seed: int,
    sched: Optional[NoiseSchedule] = None,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Noise-prediction MSE at a seeded (t, eps) draw, with gradients for the trainable set.

    The trainable set is the adapters' A/B factors when ``adapters`` is given,
    otherwise every model weight. ``z0`` may be one video or a batch.
    """
    sched = sched or make_schedule()
    batch = z0 if z0.dim() == 5 else z0.unsqueeze(0)
    names, tensors = _trainable(model, adapters)
    gen = torch.Generator().manual_seed(int(seed))
    t, eps = noise_draws(tuple(batch.shape), sched.T, gen, batch.dtype)
    flags = [x.requires_grad for x in tensors]
    for x in tensors:
        x.requires_grad_(True)
    try:
        loss = eps_mse(model, adapters, batch, routing, t, eps, sched)
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    finally:
        for x, f in zip(tensors, flags):
            x.requires_grad_(f)
    grads = {n: (g if g is not None else torch.zeros_like(x)) for n, x, g in zip(names, tensors, grads)}
    return float(loss.detach()), grads


def evaluation_loss(model, adapters, z0: torch.Tensor, routing, sched: NoiseSchedule, draws: int = 64, seed: int = 12345) -> float:
    """Low-variance estimate of the noise-prediction loss on fixed (t, eps) draws."""
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for _ in range(draws):
            batch = z0 if z0.dim() == 5 else z0.unsqueeze(0)
            t, eps = noise_draws(tuple(batch.shape), sched.T, gen, batch.dtype)
            total += float(eps_mse(model, adapters, batch, routing, t, eps, sched))
    return total / draws


class _Guard:
    """Abort when the loss stays above 10x its initial value for 50 consecutive steps."""

    def __init__(self, factor: float = 10.0, patience: int = 50):
        self.factor, self.patience = factor, patience
        self.initial: Optional[float] = None
        self.bad = 0

    def __call__(self, step: int, loss: float) -> None:
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        if self.initial is None:
            self.initial = loss
            return
        self.bad = self.bad + 1 if loss > self.factor * self.initial else 0
        if self.bad >= self.patience:
            raise DivergenceError(f"loss above {self.factor}x initial for {self.patience} steps (step {step})")


def _run(
    step_fn: Callable[[torch.Generator], torch.Tensor],
    tensors: list[torch.Tensor],
    cfg: TrainConfig,
    progress: Optional[Callable[[int, float], None]] = None,
) -> list[float]:
    gen = torch.Generator().manual_seed(int(cfg.seed))
    state = OptimizerState.zeros_like(tensors)
    guard = _Guard()
    losses = []
    for x in tensors:
        x.requires_grad_(True)
    try:
        for step in range(cfg.steps):
            loss = step_fn(gen)
            grads = torch.autograd.grad(loss, tensors, allow_unused=True)
            grads = [g if g is not None else torch.zeros_like(x) for x, g in zip(tensors, grads)]
            value = float(loss.detach())
            guard(step, value)
            _optimizer_step(cfg, tensors, grads, state)
            losses.append(value)
            if progress is not None:
                progress(step, value)
    finally:
        for x in tensors:
            x.requires_grad_(False)
    return losses


def pretrain_base(
    model: Denoiser,
    corpus: Corpus,
    cfg: TrainConfig = TrainConfig(),
    sched: Optional[NoiseSchedule] = None,
    progress=None,
) -> tuple[Denoiser, list[float]]:
    """Train every weight of a copy of ``model`` on the corpus; returns the trained copy and the loss curve.

    Each item's prompt is replaced by the null prompt with probability
    ``cfg.cond_drop_prob`` so the network also learns the unconditional branch.
    """
    if len(corpus) == 0:
        raise ValueError("cannot pretrain on an empty corpus")
    sched = sched or make_schedule()
    model = model.clone()
    dtype = model.dtype
    d = model.config.embed_dim
    videos = torch.stack([torch.from_numpy(np.asarray(it.video)) for it in corpus.items]).to(dtype)
    embeds = torch.stack([embed_prompt(it.prompt, d, dtype=dtype) for it in corpus.items])
    null = embed_prompt(NULL_PROMPT, d, dtype=dtype)

    def step_fn(gen):
        idx = torch.randint(0, len(corpus), (cfg.batch,), generator=gen)
        drop = torch.rand(cfg.batch, generator=gen, dtype=torch.float64) < cfg.cond_drop_prob
        ctx = torch.where(drop[:, None, None], null, embeds[idx])
        z0 = videos[idx]
        t, eps = noise_draws(tuple(z0.shape), sched.T, gen, dtype)
        return eps_mse(model, None, z0, PromptRouting.uniform(ctx), t, eps, sched)

    losses = _run(step_fn, [model.params[n] for n in model.params], cfg, progress)
    return model, losses


def train_lora(
    base: Denoiser,
    videos: Sequence[np.ndarray],
    prompt: Prompt,
    adapter: LoraAdapter,
    cfg: TrainConfig,
    sched: Optional[NoiseSchedule] = None,
    progress=None,
) -> tuple[LoraAdapter, list[float]]:
    """Fit a copy of ``adapter`` to ``videos`` under ``prompt`` with the base weights frozen."""
    sched = sched or make_schedule()
    dtype = base.dtype
    data = torch.stack([torch.from_numpy(np.asarray(v)) for v in videos]).to(dtype)
    emb = embed_prompt(prompt, base.config.embed_dim, dtype=dtype)
    null = embed_prompt(NULL_PROMPT, base.config.embed_dim, dtype=dtype)
    adapter = adapter.copy()

    def step_fn(gen):
        idx = torch.randint(0, len(data), (cfg.batch,), generator=gen)
        drop = torch.rand(cfg.batch, generator=gen, dtype=torch.float64) < cfg.cond_drop_prob
        ctx = torch.where(drop[:, None, None], null, emb.expand(cfg.batch, *emb.shape))
        z0 = data[idx]
        t, eps = noise_draws(tuple(z0.shape), sched.T, gen, dtype)
        return eps_mse(base, [adapter], z0, PromptRouting.uniform(ctx), t, eps, sched)

    losses = _run(step_fn, adapter.tensors, cfg, progress)
    adapter.meta.update(prompt=str(prompt), steps=cfg.steps, lr=cfg.lr)
    return adapter, losses


def lift_static(image: np.ndarray, frames: int) -> np.ndarray:
    """Repeat a ``1 x C x H x W`` image into a static ``frames``-long video."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    return np.repeat(image[:1], frames, axis=0)


def train_appearance_lora(
    base: Denoiser,
    refs: Sequence[np.ndarray],
    prompt: Prompt,
    layers=frozenset({2, 6}),
    cfg: Optional[TrainConfig] = None,
    rank: int = 4,
    concept_id: str = "",
    sched: Optional[NoiseSchedule] = None,
    progress=None,
) -> tuple[LoraAdapter, list[float]]:
    """Spatial LoRA on ``layers`` fitted to reference images lifted to static videos."""
    if not refs:
        raise ValueError("appearance training needs at least one reference image")
    cfg = cfg or appearance_lora_config()
    no_cross = sorted(i for i in layers if not base.config.layer_specs[i].has_cross_attn)
    if no_cross:
        warnings.warn(f"layers {no_cross} have no cross-attention; only their self-attention is adapted", stacklevel=2)
    adapter = init_adapter(base, layers, "spatial", rank, seed=cfg.seed, kind="appearance", concept_id=concept_id or str(prompt))
    videos = [lift_static(r, base.config.frames) for r in refs]
    return train_lora(base, videos, prompt, adapter, cfg, sched, progress)


def train_motion_lora(
    base: Denoiser,
    ref_video: np.ndarray,
    prompt: Prompt,
    layers=frozenset({2, 5}),
    cfg: Optional[TrainConfig] = None,
    rank: int = 4,
    concept_id: str = "",
    sched: Optional[NoiseSchedule] = None,
    progress=None,
) -> tuple[LoraAdapter, list[float]]:
    """Temporal LoRA on ``layers`` fitted to a single reference video."""
    if np.asarray(ref_video).shape[0] != base.config.frames:
        raise ValueError(f"reference video must have {base.config.frames} frames")
    cfg = cfg or motion_lora_config()
    adapter = init_adapter(base, layers, "temporal", rank, seed=cfg.seed, kind="motion", concept_id=concept_id or str(prompt))
    return train_lora(base, [ref_video], prompt, adapter, cfg, sched, progress)

"""Toy 9-layer video denoiser with per-layer prompt routing.

Layers 0-3 go down, 4 is the middle, 5-8 go up. Each layer has a spatial
module (residual block, self-attention and, except at 3 and 5, cross-attention
on the routed prompt) and, except at 4, a temporal module attending over
frames. Weights live in a flat dict keyed ``layer{i}.{spatial|temporal}.{block}.{matrix}``
so adapters and checkpoints can address any of them by name.

Projection matrices act on row vectors (``y = x @ W``) so a matrix of shape
``m x n`` maps width ``m`` to width ``n``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import container

if TYPE_CHECKING:
    from .lora import LoraAdapter

N_LAYERS = 9
NO_CROSS_ATTN = frozenset({3, 5})
NO_TEMPORAL = frozenset({4})
CROSS_ATTN_LAYERS = tuple(i for i in range(N_LAYERS) if i not in NO_CROSS_ATTN)
TEMPORAL_LAYERS = tuple(i for i in range(N_LAYERS) if i not in NO_TEMPORAL)
WIDTH_MULT = (1, 1, 2, 2, 2, 2, 2, 1, 1)
ATTN_MATRICES = ("wq", "wk", "wv", "wo")
GROUPS = 8


@dataclass(frozen=True)
class LayerSpec:
    index: int
    has_cross_attn: bool
    has_temporal: bool
    width: int


def default_layer_specs(base_width: int) -> tuple[LayerSpec, ...]:
    return tuple(
        LayerSpec(i, i not in NO_CROSS_ATTN, i not in NO_TEMPORAL, base_width * WIDTH_MULT[i])
        for i in range(N_LAYERS)
    )


@dataclass(frozen=True)
class DenoiserConfig:
    frames: int = 8
    channels: int = 3
    height: int = 16
    width: int = 16
    base_width: int = 32
    embed_dim: int = 32
    time_embed_dim: int = 32
    prompt_len: int = 8
    layer_specs: tuple[LayerSpec, ...] = field(default=())

    def __post_init__(self):
        if not self.layer_specs:
            object.__setattr__(self, "layer_specs", default_layer_specs(self.base_width))

    def validate(self) -> None:
        specs = self.layer_specs
        if len(specs) != N_LAYERS or [s.index for s in specs] != list(range(N_LAYERS)):
            raise ValueError("layer_specs must list exactly layers 0..8 in order")
        for s in specs:
            if s.has_cross_attn == (s.index in NO_CROSS_ATTN):
                raise ValueError(f"layer {s.index}: cross-attention must be absent exactly at {sorted(NO_CROSS_ATTN)}")
            if s.has_temporal == (s.index in NO_TEMPORAL):
                raise ValueError(f"layer {s.index}: temporal module must be absent exactly at {sorted(NO_TEMPORAL)}")
            if s.width < GROUPS or s.width % GROUPS:
                raise ValueError(f"layer {s.index}: width {s.width} must be a positive multiple of {GROUPS}")
        if self.height % 4 or self.width % 4 or max(self.height, self.width) > 32:
            raise ValueError("frame size must be divisible by 4 and at most 32")
        if self.frames < 1 or self.channels < 1:
            raise ValueError("frames and channels must be positive")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def video_shape(self) -> tuple[int, int, int, int]:
        return (self.frames, self.channels, self.height, self.width)


class PromptRouting:
    """Prompt embedding per cross-attention layer.

    Values are ``L x d`` tensors, or ``B x L x d`` when a batch carries a
    different prompt per item.
    """

    def __init__(self, per_layer: Mapping[int, torch.Tensor]):
        keys = set(per_layer)
        if keys != set(CROSS_ATTN_LAYERS):
            missing = sorted(set(CROSS_ATTN_LAYERS) - keys)
            extra = sorted(keys - set(CROSS_ATTN_LAYERS))
            raise ValueError(f"routing must cover layers {list(CROSS_ATTN_LAYERS)}; missing {missing}, extra {extra}")
        self.per_layer = dict(sorted(per_layer.items()))

    @classmethod
    def uniform(cls, embedding: torch.Tensor) -> "PromptRouting":
        return cls({i: embedding for i in CROSS_ATTN_LAYERS})

    @classmethod
    def inject(cls, base: torch.Tensor, injected: torch.Tensor, layers: Iterable[int]) -> "PromptRouting":
        layers = set(layers)
        bad = layers - set(CROSS_ATTN_LAYERS)
        if bad:
            raise ValueError(f"cannot route a prompt to layers without cross-attention: {sorted(bad)}")
        return cls({i: injected if i in layers else base for i in CROSS_ATTN_LAYERS})

    @staticmethod
    def batch(routings: Sequence["PromptRouting"]) -> "PromptRouting":
        return PromptRouting({i: torch.stack([r.per_layer[i] for r in routings]) for i in CROSS_ATTN_LAYERS})

    def stack(self, other: "PromptRouting") -> "PromptRouting":
        """Batch of two: ``other`` first, then ``self`` (the unconditional/conditional CFG order)."""
        return PromptRouting.batch([other, self])


def _sinusoid(pos: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = pos.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def param_shapes(config: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    """Every named weight of the network and its shape, in forward order."""
    specs = config.layer_specs
    w = [s.width for s in specs]
    dt, d = config.time_embed_dim, config.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "time.mlp.w1": (dt, dt),
        "time.mlp.b1": (dt,),
        "time.mlp.w2": (dt, dt),
        "time.mlp.b2": (dt,),
        "stem.conv.weight": (w[0], config.channels, 3, 3),
        "stem.conv.bias": (w[0],),
    }
    for s in specs:
        i = s.index
        if i == 0:
            c_in = w[0]
        elif i <= 4:
            c_in = w[i - 1]
        else:
            c_in = w[i - 1] + w[N_LAYERS - 1 - i]
        p = f"layer{i}.spatial"
        shapes[f"{p}.res.conv1"] = (s.width, c_in, 3, 3)
        shapes[f"{p}.res.bias1"] = (s.width,)
        shapes[f"{p}.res.temb"] = (dt, s.width)
        shapes[f"{p}.res.conv2"] = (s.width, s.width, 3, 3)
        shapes[f"{p}.res.bias2"] = (s.width,)
        if c_in != s.width:
            shapes[f"{p}.res.skip"] = (c_in, s.width)
        for m in ATTN_MATRICES:
            shapes[f"{p}.self_attn.{m}"] = (s.width, s.width)
        if s.has_cross_attn:
            shapes[f"{p}.cross_attn.wq"] = (s.width, s.width)
            shapes[f"{p}.cross_attn.wk"] = (d, s.width)
            shapes[f"{p}.cross_attn.wv"] = (d, s.width)
            shapes[f"{p}.cross_attn.wo"] = (s.width, s.width)
        if s.has_temporal:
            for m in ATTN_MATRICES:
                shapes[f"layer{i}.temporal.attn.{m}"] = (s.width, s.width)
    shapes["out.conv.weight"] = (config.channels, w[-1], 3, 3)
    shapes["out.conv.bias"] = (config.channels,)
    return shapes


class Denoiser:
    """Named weights plus the config that gives them meaning.

    Calling the instance runs :func:`forward`. Weights are treated as immutable
    by everything except the pretraining optimizer.
    """

    def __init__(self, config: DenoiserConfig, params: dict[str, torch.Tensor]):
        expected = param_shapes(config)
        if set(params) != set(expected):
            raise ValueError(f"parameter names do not match config: {sorted(set(params) ^ set(expected))[:5]}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ValueError(f"{name}: shape {tuple(params[name].shape)} != {shape}")
        self.config = config
        self.params = params

    @property
    def video_shape(self) -> tuple[int, int, int, int]:
        return self.config.video_shape

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.params.values())).dtype

    def __call__(self, z_t, t, routing, adapters=None, **kw) -> torch.Tensor:
        return forward(self, z_t, t, routing, adapters, **kw)

    def to(self, dtype: torch.dtype) -> "Denoiser":
        return Denoiser(self.config, {k: v.detach().to(dtype).clone() for k, v in self.params.items()})

    def clone(self) -> "Denoiser":
        return self.to(self.dtype)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        cfg = self.config
        meta = {
            "type": "denoiser",
            "frames": cfg.frames, "channels": cfg.channels, "height": cfg.height, "width": cfg.width,
            "base_width": cfg.base_width, "embed_dim": cfg.embed_dim,
            "time_embed_dim": cfg.time_embed_dim, "prompt_len": cfg.prompt_len,
            "layer_widths": [s.width for s in cfg.layer_specs],
        }
        container.save(path, {k: v.detach().cpu().numpy() for k, v in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "Denoiser":
        arrays, meta = container.load(path)
        if meta.get("type") != "denoiser":
            raise container.CorruptContainerError(f"{path} does not hold a denoiser checkpoint")
        widths = meta.pop("layer_widths")
        meta.pop("type")
        specs = tuple(LayerSpec(i, i not in NO_CROSS_ATTN, i not in NO_TEMPORAL, int(wd)) for i, wd in enumerate(widths))
        cfg = DenoiserConfig(layer_specs=specs, **meta)
        return cls(cfg, {k: torch.from_numpy(v) for k, v in arrays.items()})


def build_denoiser(config: DenoiserConfig = DenoiserConfig(), seed: int = 0, dtype=torch.float32) -> Denoiser:
    config.validate()
    gen = torch.Generator().manual_seed(int(seed))
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1 or name.endswith(".wo"):
            w = torch.zeros(shape, dtype=torch.float64)
        else:
            fan_in = shape[1] * shape[2] * shape[3] if len(shape) == 4 else shape[0]
            w = torch.randn(shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)
        params[name] = w.to(dtype)
    return Denoiser(config, params)


def param_count(model: Denoiser, adapters: Optional[Iterable["LoraAdapter"]] = None) -> int:
    """Scalar parameters of the base model, or of the adapters' A/B factors when given."""
    if adapters is not None:
        return sum(e.A.numel() + e.B.numel() for ad in adapters for e in ad.entries)
    return sum(v.numel() for v in model.params.values())


def effective_weights(params: Mapping[str, torch.Tensor], adapters) -> dict[str, torch.Tensor]:
    """Overlay ``W + scale * A @ B`` for every adapter target; stored weights are untouched."""
    if not adapters:
        return dict(params)
    eff = dict(params)
    for ad in adapters:
        for e in ad.entries:
            key = e.target.key
            if key not in eff:
                raise KeyError(f"adapter {ad.concept_id!r} targets unknown weight {key!r}")
            eff[key] = eff[key] + ad.scale * (e.A @ e.B)
    return eff


# forward pieces ------------------------------------------------------------

def _attend(q, k, v, mask=None):
    return F.scaled_dot_product_attention(q, k, v, attn_mask=mask)


def _self_attention(W, p, h):
    # h: (N, tokens, width)
    x = F.layer_norm(h, h.shape[-1:])
    out = _attend(x @ W[f"{p}.wq"], x @ W[f"{p}.wk"], x @ W[f"{p}.wv"])
    return h + out @ W[f"{p}.wo"]


def _cross_attention(W, p, h, ctx, mask):
    x = F.layer_norm(h, h.shape[-1:])
    out = _attend(x @ W[f"{p}.wq"], ctx @ W[f"{p}.wk"], ctx @ W[f"{p}.wv"], mask[:, None, :])
    return h + out @ W[f"{p}.wo"]


def _res_block(W, p, x, temb):
    h = F.conv2d(F.silu(F.group_norm(x, GROUPS)), W[f"{p}.conv1"], padding=1)
    h = h + W[f"{p}.bias1"][:, None, None] + (F.silu(temb) @ W[f"{p}.temb"])[:, :, None, None]
    h = F.conv2d(F.silu(F.group_norm(h, GROUPS)), W[f"{p}.conv2"], padding=1) + W[f"{p}.bias2"][:, None, None]
    skip = W.get(f"{p}.skip")
    if skip is not None:
        x = torch.einsum("nchw,cd->ndhw", x, skip)
    return x + h


def _context(routing: PromptRouting, layer: int, batch: int, frames: int, dtype):
    ctx = routing.per_layer[layer].to(dtype)
    if ctx.dim() == 2:
        ctx = ctx.expand(batch, *ctx.shape)
    elif ctx.shape[0] != batch:
        raise ValueError(f"routing batch {ctx.shape[0]} does not match input batch {batch}")
    mask = ctx.abs().sum(-1) > 0
    # one copy per frame so spatial ops see (batch*frames) items
    ctx = ctx.repeat_interleave(frames, dim=0)
    mask = mask.repeat_interleave(frames, dim=0)
    return ctx, mask


def forward(
    model: Denoiser,
    z_t: torch.Tensor,
    t,
    routing: PromptRouting,
    adapters=None,
    *,
    temporal_identity: bool = False,
) -> torch.Tensor:
    """Predict the noise in ``z_t`` (``F x C x H x W`` or batched ``B x F x C x H x W``).

    ``temporal_identity`` replaces every temporal attention by the identity map
    (a diagnostic mode in which frames are processed independently).
    """
    cfg = model.config
    single = z_t.dim() == 4
    x = z_t.unsqueeze(0) if single else z_t
    if tuple(x.shape[1:]) != cfg.video_shape:
        raise ValueError(f"expected video shape {cfg.video_shape}, got {tuple(x.shape[1:])}")
    if not isinstance(routing, PromptRouting):
        raise TypeError("routing must be a PromptRouting")
    B, Fr = x.shape[:2]
    dtype = x.dtype
    W = effective_weights(model.params, adapters)

    t = torch.as_tensor(t)
    if t.dim() == 0:
        t = t.expand(B)
    temb = _sinusoid(t, cfg.time_embed_dim).to(dtype)
    temb = F.silu(temb @ W["time.mlp.w1"] + W["time.mlp.b1"]) @ W["time.mlp.w2"] + W["time.mlp.b2"]
    temb = temb.repeat_interleave(Fr, dim=0)

    frame_pos = {}
    h = x.reshape(B * Fr, *cfg.video_shape[1:])
    h = F.conv2d(h, W["stem.conv.weight"], W["stem.conv.bias"], padding=1)
    skips = []
    for spec in cfg.layer_specs:
        i = spec.index
        if i >= 5:
            h = torch.cat([h, skips[N_LAYERS - 1 - i]], dim=1)
        p = f"layer{i}.spatial"
        h = _res_block(W, f"{p}.res", h, temb)
        N, C, Hh, Ww = h.shape
        tok = h.flatten(2).transpose(1, 2)
        tok = _self_attention(W, f"{p}.self_attn", tok)
        if spec.has_cross_attn:
            ctx, mask = _context(routing, i, B, Fr, dtype)
            tok = _cross_attention(W, f"{p}.cross_attn", tok, ctx, mask)
        if spec.has_temporal and not temporal_identity:
            if C not in frame_pos:
                frame_pos[C] = _sinusoid(torch.arange(Fr), C).to(dtype)
            # (B*F, HW, C) -> (B*HW, F, C)
            tt = tok.reshape(B, Fr, Hh * Ww, C).transpose(1, 2).reshape(B * Hh * Ww, Fr, C)
            q = F.layer_norm(tt, (C,)) + frame_pos[C]
            pt = f"layer{i}.temporal.attn"
            out = _attend(q @ W[f"{pt}.wq"], q @ W[f"{pt}.wk"], q @ W[f"{pt}.wv"])
            tt = tt + out @ W[f"{pt}.wo"]
            tok = tt.reshape(B, Hh * Ww, Fr, C).transpose(1, 2).reshape(B * Fr, Hh * Ww, C)
        h = tok.transpose(1, 2).reshape(N, C, Hh, Ww)
        if i < 4:
            skips.append(h)
        if i in (0, 1):
            h = F.avg_pool2d(h, 2)
        elif i in (6, 7):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
    h = F.conv2d(F.silu(F.group_norm(h, GROUPS)), W["out.conv.weight"], W["out.conv.bias"], padding=1)
    out = h.reshape(B, *cfg.video_shape)
    return out[0] if single else out

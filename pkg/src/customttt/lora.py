"""Low-rank adapters bound to named attention projections of a :class:`Denoiser`."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import torch

from . import container
from .model import ATTN_MATRICES, Denoiser, effective_weights

MODULE_KINDS = ("spatial", "temporal")
ADAPTER_KINDS = ("appearance", "motion")


@dataclass(frozen=True, order=True)
class LoraTarget:
    layer: int
    module_kind: str
    matrix: str  # "<block>.<matrix>", e.g. "cross_attn.wq"

    @property
    def key(self) -> str:
        return f"layer{self.layer}.{self.module_kind}.{self.matrix}"

    @classmethod
    def parse(cls, key: str) -> "LoraTarget":
        layer, kind, block, matrix = key.split(".")
        return cls(int(layer.removeprefix("layer")), kind, f"{block}.{matrix}")


@dataclass
class LoraEntry:
    target: LoraTarget
    A: torch.Tensor  # m x r
    B: torch.Tensor  # r x n


@dataclass
class LoraAdapter:
    entries: list[LoraEntry]
    rank: int
    kind: str
    concept_id: str
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.kind not in ADAPTER_KINDS:
            raise ValueError(f"adapter kind must be one of {ADAPTER_KINDS}, got {self.kind!r}")
        for e in self.entries:
            if e.A.shape[1] != self.rank or e.B.shape[0] != self.rank:
                raise ValueError(f"{e.target.key}: factors {tuple(e.A.shape)}, {tuple(e.B.shape)} disagree with rank {self.rank}")

    @property
    def targets(self) -> list[LoraTarget]:
        return [e.target for e in self.entries]

    @property
    def tensors(self) -> list[torch.Tensor]:
        return [t for e in self.entries for t in (e.A, e.B)]

    def copy(self, requires_grad: bool = False) -> "LoraAdapter":
        entries = [
            LoraEntry(e.target, e.A.detach().clone().requires_grad_(requires_grad), e.B.detach().clone().requires_grad_(requires_grad))
            for e in self.entries
        ]
        return replace(self, entries=entries, meta=dict(self.meta))

    def to(self, dtype: torch.dtype) -> "LoraAdapter":
        entries = [LoraEntry(e.target, e.A.detach().to(dtype).clone(), e.B.detach().to(dtype).clone()) for e in self.entries]
        return replace(self, entries=entries, meta=dict(self.meta))

    def delta(self, target: LoraTarget) -> torch.Tensor:
        for e in self.entries:
            if e.target == target:
                return self.scale * (e.A @ e.B)
        raise KeyError(target.key)


def attention_targets(model: Denoiser, layers: Iterable[int], module_kind: str) -> list[LoraTarget]:
    """All attention projections of ``module_kind`` in ``layers`` (raises if a layer lacks the module)."""
    if module_kind not in MODULE_KINDS:
        raise ValueError(f"module kind must be one of {MODULE_KINDS}, got {module_kind!r}")
    specs = model.config.layer_specs
    targets = []
    for layer in sorted(set(layers)):
        if not 0 <= layer < len(specs):
            raise ValueError(f"no layer {layer}")
        spec = specs[layer]
        if module_kind == "temporal":
            if not spec.has_temporal:
                raise ValueError(f"layer {layer} has no temporal module")
            blocks = ["attn"]
        else:
            blocks = ["self_attn"] + (["cross_attn"] if spec.has_cross_attn else [])
        targets += [LoraTarget(layer, module_kind, f"{b}.{m}") for b in blocks for m in ATTN_MATRICES]
    return targets


def init_adapter(
    model: Denoiser,
    layers: Iterable[int],
    module_kind: str,
    rank: int = 4,
    seed: int = 0,
    kind: Optional[str] = None,
    concept_id: str = "",
    std: float = 0.02,
) -> LoraAdapter:
    """Gaussian ``A`` (std 0.02) and zero ``B`` on every attention projection of the chosen layers."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    kind = kind or ("appearance" if module_kind == "spatial" else "motion")
    gen = torch.Generator().manual_seed(int(seed))
    entries = []
    for target in attention_targets(model, layers, module_kind):
        W = model.params[target.key]
        m, n = W.shape
        A = (torch.randn((m, rank), generator=gen, dtype=torch.float64) * std).to(W.dtype)
        entries.append(LoraEntry(target, A, torch.zeros((rank, n), dtype=W.dtype)))
    return LoraAdapter(entries, rank, kind, concept_id)


def apply(W0: torch.Tensor, A: torch.Tensor, B: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    if A.shape[0] != W0.shape[0] or B.shape[1] != W0.shape[1] or A.shape[1] != B.shape[0]:
        raise ValueError(f"cannot apply {tuple(A.shape)} @ {tuple(B.shape)} to a {tuple(W0.shape)} weight")
    return W0 + scale * (A @ B)


def check_targets(model: Denoiser, adapters: Sequence[LoraAdapter]) -> None:
    seen: dict[tuple[str, str], str] = {}
    for ad in adapters:
        for e in ad.entries:
            key = e.target.key
            if key not in model.params:
                raise KeyError(f"adapter {ad.concept_id!r} targets unknown weight {key!r}")
            W = model.params[key]
            if (e.A.shape[0], e.B.shape[1]) != tuple(W.shape):
                raise ValueError(f"{key}: adapter is {e.A.shape[0]}x{e.B.shape[1]}, weight is {tuple(W.shape)}")
            if (ad.kind, key) in seen:
                raise ValueError(f"two {ad.kind} adapters target {key} ({seen[(ad.kind, key)]!r}, {ad.concept_id!r})")
            seen[(ad.kind, key)] = ad.concept_id


def merge_into(model: Denoiser, adapters: Sequence[LoraAdapter]) -> Denoiser:
    """New model with every targeted weight replaced by ``W + scale * A @ B``."""
    adapters = list(adapters)
    check_targets(model, adapters)
    with torch.no_grad():
        params = effective_weights(model.params, adapters)
        params = {k: v.detach().clone() for k, v in params.items()}
    return Denoiser(model.config, params)


def save_adapter(adapter: LoraAdapter, path) -> None:
    arrays = {}
    for e in adapter.entries:
        arrays[f"{e.target.key}.A"] = e.A.detach().cpu().numpy()
        arrays[f"{e.target.key}.B"] = e.B.detach().cpu().numpy()
    meta = {
        "type": "lora",
        "kind": adapter.kind,
        "concept_id": adapter.concept_id,
        "rank": adapter.rank,
        "scale": adapter.scale,
        "targets": [e.target.key for e in adapter.entries],
        "extra": json.dumps(adapter.meta, sort_keys=True),
    }
    container.save(path, arrays, meta)


def load_adapter(path) -> LoraAdapter:
    arrays, meta = container.load(path)
    if meta.get("type") != "lora":
        raise container.CorruptContainerError(f"{path} does not hold an adapter")
    try:
        rank = int(meta["rank"])
        entries = []
        for key in meta["targets"]:
            A, B = arrays[f"{key}.A"], arrays[f"{key}.B"]
            if A.ndim != 2 or B.ndim != 2 or A.shape[1] != rank or B.shape[0] != rank:
                raise container.CorruptContainerError(f"{key}: shapes {A.shape}, {B.shape} disagree with rank {rank}")
            entries.append(LoraEntry(LoraTarget.parse(key), torch.from_numpy(A), torch.from_numpy(B)))
        return LoraAdapter(entries, rank, meta["kind"], meta["concept_id"], float(meta["scale"]), json.loads(meta["extra"]))
    except KeyError as exc:
        raise container.CorruptContainerError(f"adapter manifest missing {exc}") from exc

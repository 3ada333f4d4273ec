"""The held-out customization setup shared by the CLI, the benchmark and the acceptance tests.

The base model is pretrained on every catalog concept except appearance
``sks7`` and motion ``mot3``. Those two are the customization targets: the
appearance adapter learns ``sks7`` from reference images and the motion adapter
learns ``mot3`` from one video of a seen sprite (``sks0``) moving along it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import (
    BACKGROUND_TOKENS,
    N_APPEARANCES,
    N_MOTIONS,
    NULL_PROMPT,
    Corpus,
    CorpusItem,
    Prompt,
    appearance_concept,
    concept_prompt,
    embed_prompt,
    make_corpus,
    motion_concept,
    render_reference_images,
    render_video,
)
from .evaluation import BenchmarkCase, MetricsReport, benchmark
from .lora import LoraAdapter
from .model import Denoiser, DenoiserConfig, PromptRouting, build_denoiser
from .scheduler import NoiseSchedule, ddim_sample, make_schedule
from .train import TrainConfig, appearance_lora_config, motion_lora_config, pretrain_base, train_appearance_lora, train_motion_lora
from .ttt import TTTConfig, TTTResult, prompt_pool, run_ttt

log = logging.getLogger(__name__)

HELD_OUT_APPEARANCE = 7
HELD_OUT_MOTION = 3
MOTION_SOURCE_APPEARANCE = 0  # sprite carrying the reference motion
EVAL_SUFFIXES = ((), ("in", "park"), ("in", "city"), ("in", "forest"), ("in", "snow"))

# desk learning rates for the LoRA stages, keeping temporal at 5x spatial
DESK_SPATIAL_LR = 2e-3
DESK_TEMPORAL_LR = 1e-3
DESK_TEMPORAL_STEPS = 2000


@dataclass
class LabConfig:
    corpus_seed: int = 0
    per_pair: int = 4
    background_prob: float = 0.5
    base_seed: int = 0
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    appearance: TrainConfig = field(default_factory=lambda: appearance_lora_config(lr=DESK_SPATIAL_LR))
    motion: TrainConfig = field(default_factory=lambda: motion_lora_config(lr=DESK_TEMPORAL_LR, steps=DESK_TEMPORAL_STEPS))
    rank: int = 4
    appearance_layers: tuple[int, ...] = (2, 6)
    motion_layers: tuple[int, ...] = (2, 5)
    sampling_steps: int = 25
    cfg_scale: float = 9.0
    n_refs: int = 5

    def base_key(self) -> str:
        """Hash of everything the pretrained base depends on."""
        doc = {"corpus_seed": self.corpus_seed, "per_pair": self.per_pair, "background_prob": self.background_prob,
               "base_seed": self.base_seed, "pretrain": asdict(self.pretrain)}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def default_corpus(cfg: LabConfig = LabConfig()) -> Corpus:
    """All catalog pairs except the held-out ones; half the prompts gain a background phrase."""
    corpus = make_corpus(range(N_APPEARANCES), [None, *range(N_MOTIONS)], cfg.per_pair,
                         {f"sks{HELD_OUT_APPEARANCE}", f"mot{HELD_OUT_MOTION}"}, seed=cfg.corpus_seed)
    rng = np.random.default_rng([cfg.corpus_seed, 0xB6])
    items = []
    for it in corpus.items:
        prompt = it.prompt
        if rng.random() < cfg.background_prob:
            prompt = Prompt(prompt.tokens + ("in", BACKGROUND_TOKENS[1 + rng.integers(len(BACKGROUND_TOKENS) - 1)]))
        items.append(CorpusItem(it.video, prompt, it.appearance, it.motion))
    return Corpus(items, corpus.held_out)


def cache_dir() -> Path:
    return Path(os.environ.get("CUSTOMTTT_CACHE", Path.home() / ".cache" / "customttt"))


def pretrained_base(cfg: LabConfig = LabConfig(), cache: Optional[Path] = None, progress=None) -> Denoiser:
    """Pretrained base model, loaded from the cache when a matching checkpoint exists."""
    path = Path(cache or cache_dir()) / f"base-{cfg.base_key()}.cttt"
    if path.exists():
        return Denoiser.load(path)
    log.info("pretraining base model (%d steps); cache %s", cfg.pretrain.steps, path)
    base, losses = pretrain_base(build_denoiser(DenoiserConfig(), seed=cfg.base_seed), default_corpus(cfg), cfg.pretrain,
                                 progress=progress)
    path.parent.mkdir(parents=True, exist_ok=True)
    base.save(path)
    path.with_suffix(".loss.csv").write_text("step,loss\n" + "".join(f"{i},{v:.8g}\n" for i, v in enumerate(losses)))
    return base


def sample_video(
    model: Denoiser,
    adapters: Optional[Sequence[LoraAdapter]],
    prompt: Prompt,
    seed: int,
    steps: int = 25,
    cfg_scale: float = 9.0,
    sched: Optional[NoiseSchedule] = None,
) -> np.ndarray:
    """Full DDIM generation, clipped to the valid pixel range."""
    sched = sched or make_schedule()
    d = model.config.embed_dim
    cond = PromptRouting.uniform(embed_prompt(prompt, d, dtype=model.dtype))
    uncond = PromptRouting.uniform(embed_prompt(NULL_PROMPT, d, dtype=model.dtype))
    z, _ = ddim_sample(model, cond, steps, cfg_scale, seed, sched, adapters=list(adapters or []) or None,
                       uncond_routing=uncond)
    return np.clip(z.detach().cpu().numpy().astype(np.float64), -1.0, 1.0)


def appearance_prompt() -> Prompt:
    return concept_prompt(HELD_OUT_APPEARANCE, None)


def motion_prompt() -> Prompt:
    return concept_prompt(MOTION_SOURCE_APPEARANCE, HELD_OUT_MOTION)


def joint_prompts() -> list[Prompt]:
    return [concept_prompt(HELD_OUT_APPEARANCE, HELD_OUT_MOTION, s) for s in EVAL_SUFFIXES]


def appearance_refs(cfg: LabConfig = LabConfig(), seed: int = 0) -> list[np.ndarray]:
    return render_reference_images(appearance_concept(HELD_OUT_APPEARANCE), cfg.n_refs, seed=seed)


def motion_reference() -> np.ndarray:
    return render_video(appearance_concept(MOTION_SOURCE_APPEARANCE), motion_concept(HELD_OUT_MOTION), seed=1)


def held_out_case(cfg: LabConfig = LabConfig()) -> BenchmarkCase:
    return BenchmarkCase(appearance_refs(cfg), motion_reference(), joint_prompts(),
                         name=f"sks{HELD_OUT_APPEARANCE}+mot{HELD_OUT_MOTION}")


def train_held_out_adapters(
    base: Denoiser,
    cfg: LabConfig = LabConfig(),
    appearance_layers: Optional[Sequence[int]] = None,
    motion_layers: Optional[Sequence[int]] = None,
    cache: Optional[Path] = None,
) -> tuple[LoraAdapter, LoraAdapter]:
    """Single-concept adapters for the held-out appearance and motion, cached next to the base."""
    from .lora import load_adapter, save_adapter

    a_layers = tuple(sorted(appearance_layers or cfg.appearance_layers))
    m_layers = tuple(sorted(motion_layers or cfg.motion_layers))
    doc = {"base": base.checksum(), "a": asdict(cfg.appearance), "m": asdict(cfg.motion), "rank": cfg.rank,
           "al": a_layers, "ml": m_layers, "refs": cfg.n_refs}
    key = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]
    root = Path(cache or cache_dir())
    pa, pm = root / f"lora-s-{key}.cttt", root / f"lora-t-{key}.cttt"
    if pa.exists() and pm.exists():
        return load_adapter(pa), load_adapter(pm)
    lora_s, _ = train_appearance_lora(base, appearance_refs(cfg), appearance_prompt(), set(a_layers), cfg.appearance,
                                      rank=cfg.rank, concept_id=f"sks{HELD_OUT_APPEARANCE}")
    lora_t, _ = train_motion_lora(base, motion_reference(), motion_prompt(), set(m_layers), cfg.motion,
                                  rank=cfg.rank, concept_id=f"mot{HELD_OUT_MOTION}")
    root.mkdir(parents=True, exist_ok=True)
    save_adapter(lora_s, pa)
    save_adapter(lora_t, pm)
    return lora_s, lora_t


def default_ttt_config(cfg: LabConfig = LabConfig(), **overrides) -> TTTConfig:
    base = TTTConfig(
        sampling_steps=cfg.sampling_steps,
        cfg_scale=cfg.cfg_scale,
        appearance_prompt_pool=prompt_pool(HELD_OUT_APPEARANCE, None),
        motion_prompt_pool=prompt_pool(MOTION_SOURCE_APPEARANCE, HELD_OUT_MOTION),
    )
    return replace(base, **overrides)


def combine_with_ttt(base: Denoiser, lora_s: LoraAdapter, lora_t: LoraAdapter, cfg: LabConfig = LabConfig(),
                     **ttt_overrides) -> TTTResult:
    return run_ttt(base, lora_s, lora_t, default_ttt_config(cfg, **ttt_overrides))


def run_benchmark(methods, seeds: Sequence[int], cfg: LabConfig = LabConfig()) -> MetricsReport:
    def sample_fn(model, adapters, prompt, seed):
        return sample_video(model, adapters, prompt, seed, cfg.sampling_steps, cfg.cfg_scale)

    return benchmark(methods, [held_out_case(cfg)], seeds, sample_fn,
                     dataset=f"held-out sks{HELD_OUT_APPEARANCE} + mot{HELD_OUT_MOTION}, {len(EVAL_SUFFIXES)} prompts")


@dataclass
class FSweepRow:
    f: int
    joint: float
    per_seed_joint: list[float]
    final_ap: float
    final_tp: float


def f_sweep(base: Denoiser, lora_s: LoraAdapter, lora_t: LoraAdapter, fs: Sequence[int] = (1, 5, 15),
            seeds: Sequence[int] = (0, 1), cfg: LabConfig = LabConfig()) -> list[FSweepRow]:
    """TTT at each reference depth ``f``, scored on the held-out benchmark. Values are recorded, not ranked."""
    rows = []
    for f in fs:
        res = combine_with_ttt(base, lora_s, lora_t, cfg, f=f)
        report = run_benchmark([(f"f={f}", base, [res.appearance, res.motion])], seeds, cfg)
        row = report.rows[0]
        if row.error:
            raise RuntimeError(f"f={f}: {row.error}")
        ap = [v for _, w, v in res.curve if w == "appearance"]
        tp = [v for _, w, v in res.curve if w == "temporal"]
        rows.append(FSweepRow(f, row.joint, row.per_seed_joint, ap[-1] if ap else float("nan"), tp[-1] if tp else float("nan")))
    return rows


def f_sweep_csv(rows: Sequence[FSweepRow]) -> str:
    return "f,joint,final_ap_loss,final_tp_loss,per_seed_joint\n" + "".join(
        f"{r.f},{r.joint:.6f},{r.final_ap:.6g},{r.final_tp:.6g},{' '.join(f'{v:.6f}' for v in r.per_seed_joint)}\n" for r in rows)

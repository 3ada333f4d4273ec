"""Prompt-injection experiments: which cross-attention layers carry appearance or motion.

A generation ``V[p* -> I, p -> J]`` feeds prompt ``p_star`` to the layers in ``I``
and ``p`` to every other cross-attention layer. A layer's importance for a
criterion is how far injecting ``p_star`` there alone pulls the sample towards
``p_star``'s concept and away from ``p``'s, measured with the proxy metrics.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from .data import NULL_PROMPT, Prompt, appearance_concept, canonical_motion_video, embed_prompt, render_reference_images
from .evaluation import appearance_similarity, safe_motion_similarity
from .model import CROSS_ATTN_LAYERS, Denoiser, PromptRouting
from .scheduler import NoiseSchedule, ddim_sample, make_schedule

log = logging.getLogger(__name__)

CRITERIA = ("appearance", "motion")
METRIC_NOTE = {
    "appearance": "appearance_similarity to p_star's reference renders minus that to p's",
    "motion": "motion_similarity to p_star's canonical trajectory minus that to p's",
}


@dataclass(frozen=True)
class InjectionSpec:
    p: Prompt
    p_star: Prompt
    I: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "I", frozenset(self.I))
        bad = self.I - set(CROSS_ATTN_LAYERS)
        if bad:
            raise ValueError(f"injection layers {sorted(bad)} have no cross-attention; choose from {list(CROSS_ATTN_LAYERS)}")

    def routing(self, d: int, dtype=torch.float32) -> PromptRouting:
        return PromptRouting.inject(embed_prompt(self.p, d, dtype=dtype), embed_prompt(self.p_star, d, dtype=dtype), self.I)


def generate_with_injection(
    model: Denoiser,
    spec: InjectionSpec,
    steps: int = 25,
    cfg_scale: float = 9.0,
    seed: int = 0,
    sched: Optional[NoiseSchedule] = None,
) -> torch.Tensor:
    """DDIM sample under the hybrid routing; the unconditional branch uses the null prompt everywhere."""
    sched = sched or make_schedule()
    d = model.config.embed_dim
    uncond = PromptRouting.uniform(embed_prompt(NULL_PROMPT, d, dtype=model.dtype))
    z, _ = ddim_sample(model, spec.routing(d, model.dtype), steps, cfg_scale, seed, sched, uncond_routing=uncond)
    return z


def _concept_diff(p: Prompt, p_star: Prompt, criterion: str) -> tuple[int, int]:
    if criterion not in CRITERIA:
        raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
    diffs = [name for name, a, b in (("appearance", p.appearance_id, p_star.appearance_id),
                                      ("motion", p.motion_id, p_star.motion_id)) if a != b]
    if len(diffs) > 1:
        raise ValueError(f"prompts '{p}' and '{p_star}' differ in more than one concept token")
    if diffs and diffs[0] != criterion:
        raise ValueError(f"prompts differ in their {diffs[0]} token but the criterion is {criterion}")
    src = p.appearance_id if criterion == "appearance" else p.motion_id
    dst = p_star.appearance_id if criterion == "appearance" else p_star.motion_id
    if src is None or dst is None:
        raise ValueError(f"both prompts need a {criterion} token")
    return src, dst


class _Scorer:
    """Signed pull of a sample towards ``p_star``'s concept and away from ``p``'s."""

    def __init__(self, p: Prompt, p_star: Prompt, criterion: str, frames: int, H: int, W: int):
        src, dst = _concept_diff(p, p_star, criterion)
        self.criterion = criterion
        if criterion == "appearance":
            self.src = render_reference_images(appearance_concept(src), 5, seed=0, H=H, W=W)
            self.dst = render_reference_images(appearance_concept(dst), 5, seed=0, H=H, W=W)
        else:
            a = p.appearance_id
            self.src = canonical_motion_video(src, frames, H, W, appearance=a)
            self.dst = canonical_motion_video(dst, frames, H, W, appearance=a)

    def __call__(self, video) -> float:
        video = np.clip(video.detach().cpu().numpy().astype(np.float64), -1.0, 1.0)
        if self.criterion == "appearance":
            return appearance_similarity(video, self.dst) - appearance_similarity(video, self.src)
        return safe_motion_similarity(video, self.dst) - safe_motion_similarity(video, self.src)


@dataclass
class ImportanceReport:
    criterion: str
    p: Prompt
    p_star: Prompt
    seeds: list[int]
    layer_scores: dict[int, float]
    per_seed: dict[str, list[float]]  # cell label ("layer2", "full", "pair2+6") -> per-seed values
    full_score: float
    pair: Optional[tuple[int, int]] = None
    pair_score: Optional[float] = None
    pair_scores: dict[tuple[int, int], float] = field(default_factory=dict)
    antisymmetry: dict[int, float] = field(default_factory=dict)  # score_i(p->p*) + score_i(p*->p)

    @property
    def best_single(self) -> int:
        return max(self.layer_scores, key=lambda i: (self.layer_scores[i], -i))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "layers", "score", "antisymmetry_residual", "per_seed"])
        for i, s in self.layer_scores.items():
            w.writerow([f"layer{i}", i, f"{s:.6f}", f"{self.antisymmetry[i]:.6f}" if i in self.antisymmetry else "",
                        " ".join(f"{v:.6f}" for v in self.per_seed[f"layer{i}"])])
        for pr, s in self.pair_scores.items():
            label = f"pair{pr[0]}+{pr[1]}"
            w.writerow([label, f"{pr[0]}+{pr[1]}", f"{s:.6f}", "", " ".join(f"{v:.6f}" for v in self.per_seed[label])])
        w.writerow(["full", "+".join(map(str, CROSS_ATTN_LAYERS)), f"{self.full_score:.6f}", "",
                    " ".join(f"{v:.6f}" for v in self.per_seed["full"])])
        buf.write(f"# criterion={self.criterion}; p='{self.p}'; p_star='{self.p_star}'; seeds={self.seeds}\n")
        buf.write(f"# score = mean over seeds of {METRIC_NOTE[self.criterion]}\n")
        return buf.getvalue()


def _cell(model, scorer, p, p_star, layers, seeds, steps, cfg_scale, sched) -> list[float]:
    spec = InjectionSpec(p, p_star, frozenset(layers))
    return [scorer(generate_with_injection(model, spec, steps, cfg_scale, s, sched)) for s in seeds]


def layer_importance_scan(
    model: Denoiser,
    p: Prompt,
    p_star: Prompt,
    criterion: str,
    seeds: Sequence[int] = tuple(range(8)),
    steps: int = 25,
    cfg_scale: float = 9.0,
    sched: Optional[NoiseSchedule] = None,
    antisymmetry: bool = False,
) -> ImportanceReport:
    """Score every single cross-attention layer, plus the full-replacement calibration row.

    With ``antisymmetry=True`` the scan is repeated with ``p`` and ``p_star``
    swapped and the per-layer sums are recorded (ideally near zero).
    """
    sched = sched or make_schedule()
    seeds = list(seeds)
    Fr, _, H, W = model.video_shape
    scorer = _Scorer(p, p_star, criterion, Fr, H, W)
    per_seed: dict[str, list[float]] = {}
    for i in CROSS_ATTN_LAYERS:
        per_seed[f"layer{i}"] = _cell(model, scorer, p, p_star, {i}, seeds, steps, cfg_scale, sched)
    per_seed["full"] = _cell(model, scorer, p, p_star, CROSS_ATTN_LAYERS, seeds, steps, cfg_scale, sched)
    report = ImportanceReport(
        criterion, p, p_star, seeds,
        {i: float(np.mean(per_seed[f"layer{i}"])) for i in CROSS_ATTN_LAYERS},
        per_seed, float(np.mean(per_seed["full"])),
    )
    if antisymmetry:
        back = _Scorer(p_star, p, criterion, Fr, H, W)
        for i in CROSS_ATTN_LAYERS:
            rev = float(np.mean(_cell(model, back, p_star, p, {i}, seeds, steps, cfg_scale, sched)))
            report.antisymmetry[i] = report.layer_scores[i] + rev
        worst = max(abs(v) for v in report.antisymmetry.values())
        if worst > 0.05:
            log.warning("scan antisymmetry residual %.3f exceeds 0.05", worst)
    return report


def greedy_pair_search(
    model: Denoiser,
    p: Prompt,
    p_star: Prompt,
    criterion: str,
    best_single: int,
    seeds: Sequence[int] = tuple(range(8)),
    steps: int = 25,
    cfg_scale: float = 9.0,
    sched: Optional[NoiseSchedule] = None,
) -> tuple[tuple[int, int], float, dict[tuple[int, int], float], dict[str, list[float]]]:
    """Add each remaining cross-attention layer to ``best_single``; returns the best pair, its score,
    every pair's score and the per-seed values."""
    if best_single not in CROSS_ATTN_LAYERS:
        raise ValueError(f"layer {best_single} has no cross-attention")
    sched = sched or make_schedule()
    seeds = list(seeds)
    Fr, _, H, W = model.video_shape
    scorer = _Scorer(p, p_star, criterion, Fr, H, W)
    scores, per_seed = {}, {}
    for j in CROSS_ATTN_LAYERS:
        if j == best_single:
            continue
        pair = tuple(sorted((best_single, j)))
        vals = _cell(model, scorer, p, p_star, pair, seeds, steps, cfg_scale, sched)
        per_seed[f"pair{pair[0]}+{pair[1]}"] = vals
        scores[pair] = float(np.mean(vals))
    best = max(scores, key=lambda pr: (scores[pr], -pr[0], -pr[1]))
    return best, scores[best], scores, per_seed


def full_analysis(model: Denoiser, p: Prompt, p_star: Prompt, criterion: str, seeds: Sequence[int] = tuple(range(8)),
                  steps: int = 25, cfg_scale: float = 9.0, antisymmetry: bool = False) -> ImportanceReport:
    """Single-layer scan followed by the greedy second round."""
    report = layer_importance_scan(model, p, p_star, criterion, seeds, steps, cfg_scale, antisymmetry=antisymmetry)
    pair, score, scores, per_seed = greedy_pair_search(model, p, p_star, criterion, report.best_single, seeds, steps, cfg_scale)
    report.pair, report.pair_score, report.pair_scores = pair, score, scores
    report.per_seed.update(per_seed)
    if score < report.layer_scores[report.best_single] - 0.02:
        log.warning("best pair %s scores %.3f, below best single layer %.3f", pair, score, report.layer_scores[report.best_single])
    return report

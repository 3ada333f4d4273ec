"""Proxy metrics for text alignment, appearance similarity, motion similarity and
temporal consistency, plus the method-comparison benchmark.

All similarity metrics embed frames with a frozen hand-built feature (a soft
8x8x8 foreground colour histogram and a 4x4 luminance thumbnail of the
foreground crop) and compare embeddings by cosine.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import (
    FG_THRESHOLD,
    NoForegroundError,
    Prompt,
    _as_numpy,
    appearance_concept,
    canonical_motion_video,
    centroid_track,
    estimate_background,
    foreground_weights,
    render_reference_images,
)

log = logging.getLogger(__name__)

HIST_BINS = 8
THUMB = 4
LUMA_WEIGHT = 0.15
MIN_MOTION = 0.5  # norm (pixels) of the displacement sequence below which a track counts as static
_LUMA = np.array([0.299, 0.587, 0.114])


def _soft_histogram(pixels: np.ndarray) -> np.ndarray:
    """Trilinear 8x8x8 histogram of ``N x 3`` colours in [-1, 1]."""
    u = (np.clip(pixels, -1.0, 1.0) + 1.0) / (2.0 / HIST_BINS) - 0.5
    lo = np.floor(u)
    frac = u - lo
    lo = lo.astype(int)
    hist = np.zeros((HIST_BINS,) * 3)
    for corner in range(8):
        bits = [(corner >> c) & 1 for c in range(3)]
        idx = [np.clip(lo[:, c] + bits[c], 0, HIST_BINS - 1) for c in range(3)]
        w = np.prod([frac[:, c] if bits[c] else 1.0 - frac[:, c] for c in range(3)], axis=0)
        np.add.at(hist, tuple(idx), w)
    return hist.reshape(-1)


def _thumbnail(luma: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked 4x4 area average of ``luma`` over the bounding box of ``mask``."""
    rows, cols = np.nonzero(mask)
    r0, r1 = rows.min(), rows.max() + 1
    c0, c1 = cols.min(), cols.max() + 1
    ri = np.minimum(((rows - r0) * THUMB) // (r1 - r0), THUMB - 1)
    ci = np.minimum(((cols - c0) * THUMB) // (c1 - c0), THUMB - 1)
    acc = np.zeros((THUMB, THUMB))
    cnt = np.zeros((THUMB, THUMB))
    np.add.at(acc, (ri, ci), luma[rows, cols])
    np.add.at(cnt, (ri, ci), 1.0)
    return (acc / np.maximum(cnt, 1.0)).reshape(-1)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def video_features(video, threshold: float = FG_THRESHOLD) -> np.ndarray:
    """Unit-norm feature per frame, ``F x (512 + 16)``.

    The foreground mask comes from the video's own background estimate; a frame
    without foreground falls back to whole-frame statistics.
    """
    video = _as_numpy(video)
    fg = foreground_weights(video, threshold) > 0
    bg = estimate_background(video, threshold)
    feats = []
    for frame, mask in zip(video, fg):
        if not mask.any():
            mask = np.ones_like(mask)
            luma = np.tensordot(_LUMA, frame, axes=1)
        else:
            luma = np.tensordot(_LUMA, frame - bg, axes=1)
        hist = _soft_histogram(frame[:, mask].T)
        thumb = _thumbnail(luma, mask)
        feats.append(_unit(np.concatenate([_unit(hist), LUMA_WEIGHT * _unit(thumb)])))
    return np.stack(feats)


def appearance_similarity(video, refs: Sequence) -> float:
    """Mean cosine between every video frame and every reference image."""
    if len(refs) == 0:
        raise ValueError("appearance_similarity needs at least one reference image")
    fv = video_features(video)
    fr = np.concatenate([video_features(r) for r in refs])
    return float(np.clip((fv @ fr.T).mean(), -1.0, 1.0))


def _displacements(video) -> np.ndarray:
    # measured from the first frame: frame-to-frame steps of hard-edged sprites are quantized to half pixels
    track = centroid_track(video)
    return (track[1:] - track[0]).reshape(-1)


def motion_similarity(video, ref_video) -> float:
    """Cosine between the centroid displacement sequences (each frame relative to the first) of two videos."""
    a, b = _displacements(video), _displacements(ref_video)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    a_static, b_static = na < MIN_MOTION, nb < MIN_MOTION
    if a_static or b_static:
        return 1.0 if a_static and b_static else 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def temporal_consistency(video) -> float:
    feats = video_features(video)
    if len(feats) < 2:
        raise ValueError("temporal consistency needs at least two frames")
    return float(np.clip(np.sum(feats[1:] * feats[:-1], axis=1).mean(), -1.0, 1.0))


def text_alignment(video, prompt: Prompt, n_refs: int = 5) -> float:
    """Appearance and motion agreement with the canonical renders of the prompt's concept tokens."""
    video = _as_numpy(video)
    a, m = prompt.appearance_id, prompt.motion_id
    if a is None and m is None:
        raise ValueError(f"prompt {prompt} carries no concept token")
    F, _, H, W = video.shape
    parts = []
    if a is not None:
        parts.append(appearance_similarity(video, render_reference_images(appearance_concept(a), n_refs, seed=0, H=H, W=W)))
    if m is not None:
        parts.append(motion_similarity(video, canonical_motion_video(m, F, H, W, appearance=a)))
    return float(np.mean(parts))


def safe_motion_similarity(video, ref_video) -> float:
    """:func:`motion_similarity`, scoring a candidate without trackable foreground as 0."""
    try:
        return motion_similarity(video, ref_video)
    except NoForegroundError:
        return 0.0


def safe_text_alignment(video, prompt: Prompt) -> float:
    try:
        return text_alignment(video, prompt)
    except NoForegroundError:
        video = _as_numpy(video)
        a = prompt.appearance_id
        if a is None:
            return 0.0
        app = appearance_similarity(video, render_reference_images(appearance_concept(a), 5, 0, *video.shape[2:]))
        return 0.5 * app if prompt.motion_id is not None else app


def joint_score(text: float, appearance: float, motion: float) -> float:
    """Scalar used for TTT-vs-naive comparisons: mean of text, appearance and motion agreement."""
    return (text + appearance + motion) / 3.0


# benchmark -----------------------------------------------------------------

@dataclass
class MethodRow:
    name: str
    trainable_params: int
    text_alignment: float = math.nan
    appearance_sim: float = math.nan
    temporal_consistency: float = math.nan
    motion_sim: float = math.nan
    error: Optional[str] = None
    per_seed_joint: list[float] = field(default_factory=list)

    @property
    def joint(self) -> float:
        return joint_score(self.text_alignment, self.appearance_sim, self.motion_sim)


@dataclass
class MetricsReport:
    rows: list[MethodRow]
    dataset: str
    seeds: list[int]

    COLUMNS = ("method", "trainable_params", "text_alignment", "appearance_sim",
               "temporal_consistency", "motion_sim", "joint")

    def row(self, name: str) -> MethodRow:
        return next(r for r in self.rows if r.name == name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS + ("error",))
        for r in self.rows:
            w.writerow([r.name, r.trainable_params] + [f"{v:.6f}" for v in
                       (r.text_alignment, r.appearance_sim, r.temporal_consistency, r.motion_sim, r.joint)]
                       + [r.error or ""])
        return buf.getvalue()

    def to_table(self) -> str:
        head = f"{'Method':<16}{'Params':>10}{'Text':>9}{'Appear.':>9}{'Temporal':>10}{'Motion*':>9}{'Joint':>8}"
        lines = [f"dataset: {self.dataset}; seeds: {self.seeds}", head, "-" * len(head)]
        for r in self.rows:
            if r.error:
                lines.append(f"{r.name:<16}{r.trainable_params:>10}  ERROR: {r.error}")
                continue
            lines.append(f"{r.name:<16}{r.trainable_params:>10}{r.text_alignment:>9.3f}{r.appearance_sim:>9.3f}"
                         f"{r.temporal_consistency:>10.3f}{r.motion_sim:>9.3f}{r.joint:>8.3f}")
        lines.append("* motion similarity is an added objective proxy; joint = mean(text, appearance, motion)")
        return "\n".join(lines)


@dataclass
class BenchmarkCase:
    """One customization target: appearance references, a motion reference video and evaluation prompts."""
    appearance_refs: list
    motion_ref: np.ndarray
    prompts: list[Prompt]
    name: str = "case"


def score_video(video, case: BenchmarkCase, prompt: Prompt) -> dict[str, float]:
    video = _as_numpy(video)
    return {
        "text_alignment": safe_text_alignment(video, prompt),
        "appearance_sim": appearance_similarity(video, case.appearance_refs),
        "temporal_consistency": temporal_consistency(video),
        "motion_sim": safe_motion_similarity(video, case.motion_ref),
    }


def benchmark(methods, cases: Sequence[BenchmarkCase], seeds: Sequence[int], sample_fn, dataset: str = "") -> MetricsReport:
    """Score every method on every (case, prompt, seed).

    ``methods`` is a sequence of ``(name, model, adapters)``; ``sample_fn(model,
    adapters, prompt, seed)`` returns a video. Rows keep the given order, so list
    baselines before the proposed method.
    """
    from .model import param_count

    rows = []
    for name, model, adapters in methods:
        row = MethodRow(name, param_count(model, adapters) if adapters else 0)
        try:
            per_metric: dict[str, list[float]] = {c: [] for c in ("text_alignment", "appearance_sim", "temporal_consistency", "motion_sim")}
            for seed in seeds:
                seed_scores = []
                for case in cases:
                    for prompt in case.prompts:
                        s = score_video(sample_fn(model, adapters, prompt, seed), case, prompt)
                        for k, v in s.items():
                            per_metric[k].append(v)
                        seed_scores.append(joint_score(s["text_alignment"], s["appearance_sim"], s["motion_sim"]))
                row.per_seed_joint.append(float(np.mean(seed_scores)))
            for k, vals in per_metric.items():
                setattr(row, k, float(np.mean(vals)))
        except Exception as exc:  # a failed row is reported, not fatal
            log.exception("benchmark row %s failed", name)
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return MetricsReport(rows, dataset, list(seeds))

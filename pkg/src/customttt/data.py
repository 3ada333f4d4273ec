"""Procedural sprite-video world: concepts, rendering, prompts and the frozen text embedder.

Coordinates are continuous with pixel ``(row, col)`` covering ``[col, col+1) x [row, row+1)``,
so the centre of a 16x16 frame is ``(8.0, 8.0)``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from . import container

# 8 levels per channel sit at the centres of the 8 histogram bins over [-1, 1]
_LV = {k: -0.875 + 0.25 * k for k in range(8)}
PALETTE = np.array([
    (_LV[7], _LV[0], _LV[0]),  # red
    (_LV[0], _LV[7], _LV[0]),  # green
    (_LV[0], _LV[0], _LV[7]),  # blue
    (_LV[7], _LV[7], _LV[0]),  # yellow
    (_LV[7], _LV[0], _LV[7]),  # magenta
    (_LV[0], _LV[7], _LV[7]),  # cyan
    (_LV[7], _LV[7], _LV[7]),  # white
    (_LV[0], _LV[0], _LV[0]),  # black
    (_LV[7], _LV[4], _LV[0]),  # orange
    (_LV[4], _LV[0], _LV[7]),  # purple
    (_LV[0], _LV[5], _LV[4]),  # teal
    (_LV[7], _LV[5], _LV[6]),  # pink
    (_LV[5], _LV[7], _LV[1]),  # lime
    (_LV[1], _LV[1], _LV[7]),  # navy
    (_LV[5], _LV[2], _LV[0]),  # brown
    (_LV[4], _LV[6], _LV[7]),  # sky
])
# (style, colour a, colour b); colour sets are pairwise disjoint. Catalog concept i is drawn as
# SHAPES[i % 3]; styles are matched to shapes whose colour proportions survive sub-pixel shifts.
PATTERNS = (
    ("solid", 0, 0),
    ("checker", 1, 2),
    ("solid", 3, 3),
    ("stripes", 5, 4),
    ("checker", 6, 7),
    ("solid", 8, 8),
    ("stripes", 10, 11),
    ("checker", 12, 13),
)
SHAPES = ("square", "circle", "triangle")
TRAJECTORIES = ("linear_right", "linear_up", "diagonal", "circular", "zigzag", "bounce")
BACKGROUND_TOKENS = ("in", "park", "city", "desert", "studio", "forest", "snow")
N_APPEARANCES = len(PATTERNS)
N_MOTIONS = len(TRAJECTORIES)

VOCAB = (
    ("NULL", "a") + SHAPES
    + tuple(f"sks{i}" for i in range(N_APPEARANCES))
    + tuple(f"mot{j}" for j in range(N_MOTIONS))
    + BACKGROUND_TOKENS
)
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
MAX_PROMPT_LEN = 8
EMBED_SEED = 20240917
BG_AMPLITUDE = 0.03
FG_THRESHOLD = 0.1
FG_CEILING = 0.5  # sprite colours sit >= 0.75 from mid-gray in some channel


class NoForegroundError(ValueError):
    pass


class UnknownTokenError(ValueError):
    pass


@dataclass(frozen=True)
class AppearanceConcept:
    shape: str
    pattern_id: int
    size: float = 0.47

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if not 0 <= self.pattern_id < N_APPEARANCES:
            raise ValueError(f"pattern_id must lie in [0, {N_APPEARANCES})")

    @property
    def colors(self) -> tuple[int, ...]:
        style, a, b = PATTERNS[self.pattern_id]
        return (a,) if style == "solid" else (a, b)


@dataclass(frozen=True)
class MotionConcept:
    trajectory: str
    amplitude: float = 0.3
    phase: int = 0  # eighths of a turn; rotates circular start and flips zigzag

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")

    def offsets(self, frames: int, extent: float) -> np.ndarray:
        """Per-frame (dx, dy) displacement from the rest position, in pixels (y grows downward)."""
        A = self.amplitude * extent
        k = np.arange(frames, dtype=np.float64)
        s = k / max(frames - 1, 1)
        phi = 2 * math.pi * self.phase / 8
        zero = np.zeros(frames)
        if self.trajectory == "linear_right":
            dx, dy = A * (s - 0.5), zero
        elif self.trajectory == "linear_up":
            dx, dy = zero, -A * (s - 0.5)
        elif self.trajectory == "diagonal":
            dx, dy = A * (s - 0.5), -A * (s - 0.5)
        elif self.trajectory == "circular":
            ang = 2 * math.pi * k / frames + phi
            dx, dy = 0.5 * A * np.cos(ang), 0.5 * A * np.sin(ang)
        elif self.trajectory == "zigzag":
            sign = -1.0 if self.phase % 2 else 1.0
            dx, dy = A * (s - 0.5), sign * 0.25 * A * (-1.0) ** k
        else:  # bounce
            dx, dy = zero, A * (0.5 - np.abs(np.sin(2 * math.pi * s)))
        return np.stack([dx, dy], axis=1)


def appearance_concept(i: int) -> AppearanceConcept:
    return AppearanceConcept(SHAPES[i % len(SHAPES)], i)


def motion_concept(j: int) -> MotionConcept:
    return MotionConcept(TRAJECTORIES[j])


# rendering -----------------------------------------------------------------

def background(H: int, W: int, seed: int, channels: int = 3) -> np.ndarray:
    rng = np.random.default_rng([int(seed), 0xB6])
    return rng.uniform(-BG_AMPLITUDE, BG_AMPLITUDE, size=(channels, H, W))


def _sprite_layer(a: AppearanceConcept, cx: float, cy: float, half: float, H: int, W: int):
    """Hard-edged sprite sampled at pixel centres: (inside mask, per-pixel colour)."""
    dy = (np.arange(H) + 0.5)[:, None] - cy
    dx = (np.arange(W) + 0.5)[None, :] - cx
    if a.shape == "square":
        inside = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    elif a.shape == "circle":
        inside = dx**2 + dy**2 <= half**2
    else:  # apex up, base down
        inside = (dy >= -half) & (dy <= half) & (np.abs(dx) <= 0.5 * (dy + half))
    style, ca, cb = PATTERNS[a.pattern_id]
    # patterns live in size-normalized sprite coordinates so every scale keeps its colour proportions
    if style == "solid":
        pick_b = np.zeros_like(inside)
    elif style == "checker":
        pick_b = (dx >= 0) ^ (dy >= 0)
    else:
        pick_b = np.broadcast_to(dy >= 0, inside.shape)
    color = np.where(pick_b[None], PALETTE[cb][:, None, None], PALETTE[ca][:, None, None])
    return inside, color


def _composite(bg: np.ndarray, layer) -> np.ndarray:
    inside, color = layer
    return np.where(inside[None], color, bg)


def render_video(
    a: AppearanceConcept,
    m: Optional[MotionConcept],
    F: int = 8,
    H: int = 16,
    W: int = 16,
    seed: int = 0,
    center: Optional[tuple[float, float]] = None,
) -> np.ndarray:
    """``F x 3 x H x W`` float32 video; ``m=None`` renders a static sprite."""
    half = a.size * H / 2
    cx, cy = center if center is not None else (W / 2, H / 2)
    offs = m.offsets(F, W) if m is not None else np.zeros((F, 2))
    xs, ys = cx + offs[:, 0], cy + offs[:, 1]
    if xs.min() - half < 0 or xs.max() + half > W or ys.min() - half < 0 or ys.max() + half > H:
        raise ValueError("sprite leaves the frame along this trajectory; reduce amplitude or size")
    bg = background(H, W, seed)
    frames = [_composite(bg, _sprite_layer(a, x, y, half, H, W)) for x, y in zip(xs, ys)]
    return np.clip(np.stack(frames), -1.0, 1.0).astype(np.float32)


def render_reference_images(a: AppearanceConcept, n: int = 5, seed: int = 0, H: int = 16, W: int = 16) -> list[np.ndarray]:
    """``n`` single-frame renders at distinct positions and scales."""
    if n < 1:
        raise ValueError("need at least one reference image")
    rng = np.random.default_rng([int(seed), 0x5EF])
    out = []
    for k in range(n):
        scale = 1.0 if k == 0 else rng.uniform(0.9, 1.1)
        concept = AppearanceConcept(a.shape, a.pattern_id, a.size * scale)
        half = concept.size * H / 2
        slack_x, slack_y = max(W / 2 - half - 0.5, 0), max(H / 2 - half - 0.5, 0)
        center = (W / 2, H / 2) if k == 0 else (
            W / 2 + rng.uniform(-1, 1) * min(slack_x, 2.5),
            H / 2 + rng.uniform(-1, 1) * min(slack_y, 2.5),
        )
        out.append(render_video(concept, None, 1, H, W, seed=int(seed) * 131 + k, center=center))
    return out


def canonical_motion_video(j: int, F: int = 8, H: int = 16, W: int = 16, appearance: Optional[int] = None) -> np.ndarray:
    """Reference render of motion token ``mot{j}``, drawn with catalog sprite ``appearance`` (default 0)."""
    return render_video(appearance_concept(appearance or 0), motion_concept(j), F, H, W, seed=0)


# foreground / tracking -------------------------------------------------------

def estimate_background(video: np.ndarray, threshold: float = FG_THRESHOLD) -> np.ndarray:
    """Per-pixel temporal median, falling back to the video's overall median colour where the two disagree.

    The fallback covers pixels a sprite occupies for most frames (and every sprite pixel of a
    single image); the overall median is background as long as the sprite covers under half the frame.
    """
    med = np.median(video, axis=0)
    overall = np.median(video, axis=(0, 2, 3))[:, None, None]
    sprite_like = np.abs(med - overall).max(axis=0, keepdims=True) > threshold
    return np.where(sprite_like, overall, med)


def foreground_weights(video: np.ndarray, threshold: float = FG_THRESHOLD) -> np.ndarray:
    """``F x H x W`` deviation from the background, zeroed below the noise cutoff.

    The cutoff is ``threshold`` raised to a robust outlier bound (median + 4 sigma from the MAD)
    when the background itself is noisy, as in strongly guided samples, and never above FG_CEILING.
    """
    video = np.asarray(video, dtype=np.float64)
    dev = np.abs(video - estimate_background(video, threshold)[None]).max(axis=1)
    med = np.median(dev)
    cutoff = min(max(threshold, med + 4 * 1.4826 * np.median(np.abs(dev - med))), FG_CEILING)
    return np.where(dev > cutoff, dev, 0.0)


def centroid_track(video, threshold: float = FG_THRESHOLD) -> np.ndarray:
    """Intensity-weighted foreground centroid per frame as an ``F x 2`` array of (x, y)."""
    video = _as_numpy(video)
    w = foreground_weights(video, threshold)
    mass = w.sum(axis=(1, 2))
    if np.any(mass <= 0):
        raise NoForegroundError(f"no foreground in frame(s) {np.flatnonzero(mass <= 0).tolist()}")
    H, W = w.shape[1:]
    ys = np.arange(H) + 0.5
    xs = np.arange(W) + 0.5
    cx = (w.sum(axis=1) * xs).sum(axis=1) / mass
    cy = (w.sum(axis=2) * ys).sum(axis=1) / mass
    return np.stack([cx, cy], axis=1)


def _as_numpy(video) -> np.ndarray:
    if isinstance(video, torch.Tensor):
        video = video.detach().cpu().numpy()
    return np.asarray(video, dtype=np.float64)


# prompts -------------------------------------------------------------------

@dataclass(frozen=True)
class Prompt:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not 1 <= len(self.tokens) <= MAX_PROMPT_LEN:
            raise ValueError(f"prompt needs 1..{MAX_PROMPT_LEN} tokens, got {len(self.tokens)}")
        unknown = [t for t in self.tokens if t not in TOKEN_ID]
        if unknown:
            raise UnknownTokenError(f"unknown token(s) {unknown}")
        if sum(t.startswith("sks") for t in self.tokens) > 1 or sum(t.startswith("mot") for t in self.tokens) > 1:
            raise ValueError(f"at most one appearance and one motion token allowed: {self}")

    @classmethod
    def parse(cls, text: str) -> "Prompt":
        return cls(tuple(text.split()))

    @classmethod
    def from_ids(cls, ids: Iterable[int]) -> "Prompt":
        return cls(tuple(VOCAB[i] for i in ids))

    @property
    def ids(self) -> list[int]:
        return [TOKEN_ID[t] for t in self.tokens]

    @property
    def appearance_id(self) -> Optional[int]:
        return next((int(t[3:]) for t in self.tokens if t.startswith("sks")), None)

    @property
    def motion_id(self) -> Optional[int]:
        return next((int(t[3:]) for t in self.tokens if t.startswith("mot")), None)

    def __str__(self) -> str:
        return " ".join(self.tokens)


NULL_PROMPT = Prompt(("NULL",))


def concept_prompt(appearance: Optional[int], motion: Optional[int], extra: Sequence[str] = ()) -> Prompt:
    toks = ["a"]
    if appearance is not None:
        toks += [f"sks{appearance}", SHAPES[appearance % len(SHAPES)]]
    if motion is not None:
        toks.append(f"mot{motion}")
    return Prompt(tuple(toks) + tuple(extra))


@functools.lru_cache(maxsize=None)
def _token_table(d: int) -> np.ndarray:
    rng = np.random.default_rng([EMBED_SEED, d])
    table = rng.standard_normal((len(VOCAB), d))
    return table / np.linalg.norm(table, axis=1, keepdims=True)


def embed_prompt(p: Prompt, d: int = 32, length: int = MAX_PROMPT_LEN, dtype=torch.float32) -> torch.Tensor:
    """Frozen encoder: unit row per token from a seeded table, zero rows as padding."""
    table = _token_table(d)
    out = np.zeros((length, d))
    out[: len(p.tokens)] = table[p.ids]
    return torch.from_numpy(out).to(dtype)


# corpus --------------------------------------------------------------------

@dataclass
class CorpusItem:
    video: np.ndarray
    prompt: Prompt
    appearance: int
    motion: Optional[int]


@dataclass
class Corpus:
    items: list[CorpusItem]
    held_out: frozenset[str] = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.items)


def _item_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def make_corpus(
    appearances: Sequence[int],
    motions: Sequence[Optional[int]],
    per_pair: int,
    held_out: Iterable[str],
    seed: int = 0,
    F: int = 8,
    H: int = 16,
    W: int = 16,
    jitter: float = 1.0,
) -> Corpus:
    """Every (appearance, motion) pair not touching a held-out token, ``per_pair`` renders each.

    A ``None`` motion stands for a static sprite with a prompt lacking a motion token.
    """
    held_out = frozenset(held_out)
    if not held_out:
        raise ValueError("held_out must name at least one concept token")
    known = {f"sks{i}" for i in appearances} | {f"mot{j}" for j in motions if j is not None}
    if not held_out <= known:
        raise ValueError(f"held-out tokens {sorted(held_out - known)} are not among the given concepts")
    items = []
    index = 0
    for i in appearances:
        if f"sks{i}" in held_out:
            continue
        for j in motions:
            if j is not None and f"mot{j}" in held_out:
                continue
            for _ in range(per_pair):
                s = _item_seed(seed, index)
                rng = np.random.default_rng(s)
                center = (W / 2 + rng.uniform(-jitter, jitter), H / 2 + rng.uniform(-jitter, jitter))
                mc = motion_concept(j) if j is not None else None
                video = render_video(appearance_concept(i), mc, F, H, W, seed=s, center=center)
                items.append(CorpusItem(video, concept_prompt(i, j), i, j))
                index += 1
    if not items:
        raise ValueError("corpus is empty after excluding held-out concepts")
    return Corpus(items, held_out)


def save_corpus(corpus: Corpus, directory) -> None:
    directory = Path(directory)
    (directory / "items").mkdir(parents=True, exist_ok=True)
    lines = [f"items = {len(corpus)}", f"held_out = {','.join(sorted(corpus.held_out))}"]
    for k, item in enumerate(corpus.items):
        name = f"items/{k:05d}.cttt"
        container.save(directory / name, {"video": item.video}, {
            "prompt_ids": item.prompt.ids, "prompt": str(item.prompt),
            "appearance": item.appearance, "motion": item.motion,
        })
        lines.append(f"item.{k} = {name} | {item.prompt}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    manifest = {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        manifest[key.strip()] = value.strip()
    items = []
    for k in range(int(manifest["items"])):
        arrays, meta = container.load(directory / manifest[f"item.{k}"].split("|")[0].strip())
        items.append(CorpusItem(arrays["video"], Prompt.from_ids(meta["prompt_ids"]), meta["appearance"], meta["motion"]))
    held = manifest.get("held_out", "")
    return Corpus(items, frozenset(h for h in held.split(",") if h))

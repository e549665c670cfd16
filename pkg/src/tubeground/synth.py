"""Seeded synthetic sample generator.

Builds feature bundles with a known "planted" structure so the text-guided
token selection is verifiable: a unit direction u stands in for the query
semantics, tokens at target grid cells carry a (1 + margin) component along
u, and every other token lives in the orthogonal complement. The paired
annotation holds consistent tracks, segment, and mention spans.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tubeground.dataio import AnnotationRecord, Mention, TargetTrack, tokenize
from tubeground.encoder import FeatureBundle

__all__ = ["SynthConfig", "synth_generate", "CLASS_WORDS"]

CLASS_WORDS = [
    "person", "dog", "cat", "bear", "horse", "sheep",
    "cow", "elephant", "zebra", "giraffe", "car", "bicycle",
]

_COUNT_WORDS = {2: "two", 3: "three", 4: "four", 5: "five", 6: "six", 7: "seven", 8: "eight", 9: "nine", 10: "ten"}

_TEMPLATES = [
    ("watch", "near the water"),
    ("see", "in the field"),
    ("find", "by the road"),
    ("spot", "on the grass"),
]

_FILLERS = [
    "today", "quietly", "outside", "slowly", "there", "again",
    "now", "calmly", "together", "somewhere", "nearby", "peacefully",
]


@dataclass
class SynthConfig:
    seed: int = 0
    n_frames: int = 16
    grid_h: int = 4
    grid_w: int = 4
    dim: int = 32           # shared D_a = D_m = D_t width; see note below
    n_targets: int = 2
    margin: float = 0.5     # planted-cell similarity advantage
    noise: float = 0.2      # orthogonal noise magnitude cap
    fps: float = 2.0
    group_same_class: bool = False  # fold all targets into one counted mention
    pad_tokens_to: int | None = None  # append filler words to hit an exact token count

    def validate(self) -> None:
        if not 1 <= self.n_targets <= 10:
            raise ValueError(f"target count {self.n_targets} outside [1, 10]")
        if self.margin <= 0:
            raise ValueError("similarity margin must be positive")
        if self.n_targets > self.grid_h * self.grid_w:
            raise ValueError("more targets than grid cells to plant them in")
        if self.n_frames < 2 or self.dim < 4:
            raise ValueError("need at least 2 frames and width >= 4")
        if not 0 <= self.noise < 1:
            raise ValueError("noise must lie in [0, 1)")


def _orthogonal_noise(rng: np.random.Generator, u: np.ndarray, scale: float, size: int) -> np.ndarray:
    """Vectors orthogonal to u with norms uniform in (0, scale]."""
    if scale == 0.0:
        return np.zeros((size, u.shape[0]))
    g = rng.standard_normal((size, u.shape[0]))
    g -= np.outer(g @ u, u)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return g / norms * (rng.uniform(0.2, 1.0, size=(size, 1)) * scale)


def _cell_box(row: int, col: int, grid_h: int, grid_w: int, jx: float, jy: float) -> np.ndarray:
    w = 0.8 / grid_w
    h = 0.8 / grid_h
    cx = (col + 0.5) / grid_w + jx * 0.1 / grid_w
    cy = (row + 0.5) / grid_h + jy * 0.1 / grid_h
    return np.array([cx, cy, w, h])


def synth_generate(cfg: SynthConfig):
    """Generate one (FeatureBundle, AnnotationRecord) pair.

    Deterministic per seed. The appearance and motion grids share the
    planted-cell layout; all three modalities use one width so the planted
    cosine ordering holds in the raw feature space (the transparent-fusion
    setting used to verify query generation end to end).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_cells = cfg.grid_h * cfg.grid_w

    u = rng.standard_normal(cfg.dim)
    u /= np.linalg.norm(u)

    # distinct home cell per target; boxes jitter inside their cell
    cells = rng.choice(n_cells, size=cfg.n_targets, replace=False)
    cells.sort()

    words = [CLASS_WORDS[i] for i in rng.choice(len(CLASS_WORDS), size=cfg.n_targets, replace=False)]
    if cfg.group_same_class and cfg.n_targets > 1:
        words = [words[0]] * cfg.n_targets

    # query text and mention spans against the package tokenizer
    verb, suffix = _TEMPLATES[int(rng.integers(len(_TEMPLATES)))]
    parts = [verb]
    mentions = []
    targets_meta = []  # (mention index, class word)
    pos = 1
    groups: list = []
    for word in words:
        if groups and cfg.group_same_class and groups[-1][0] == word:
            groups[-1] = (word, groups[-1][1] + 1)
        else:
            groups.append((word, 1))
    for gi, (word, count) in enumerate(groups):
        if gi:
            parts.append("and")
            pos += 1
        if count == 1:
            parts.extend(["the", word])
            pos += 1
        else:
            parts.extend([_COUNT_WORDS[count], word])
            pos += 1
        mentions.append(Mention(class_word=word, span=(pos, pos + 1), count=count))
        for _ in range(count):
            targets_meta.append((gi, word))
        pos += 1
    parts.append(suffix)
    if cfg.pad_tokens_to is not None:
        have = len(tokenize(" ".join(parts)))
        if have > cfg.pad_tokens_to:
            raise ValueError(f"query already has {have} tokens, cannot pad to {cfg.pad_tokens_to}")
        parts.extend(_FILLERS[i % len(_FILLERS)] for i in range(cfg.pad_tokens_to - have))
    query = " ".join(parts)
    tokens = tokenize(query)
    for m in mentions:
        assert tokens[m.span[0]] == m.class_word, "mention span drifted from the tokenizer"

    # temporal segment covering at least a third of the video
    min_len = max(2, cfg.n_frames // 3)
    start = int(rng.integers(0, cfg.n_frames - min_len + 1))
    end = int(rng.integers(start + min_len - 1, cfg.n_frames))
    segment = (start, end)

    # tracks: per segment frame, a box jittered inside the target's home cell
    targets = []
    for (mi, word), cell in zip(targets_meta, cells):
        row, col = divmod(int(cell), cfg.grid_w)
        boxes = {}
        for f in range(start, end + 1):
            jx, jy = rng.uniform(-1, 1, size=2)
            boxes[f] = _cell_box(row, col, cfg.grid_h, cfg.grid_w, jx, jy)
        targets.append(TargetTrack(class_word=word, mention=mi, boxes=boxes))

    record = AnnotationRecord(
        video_id=f"synth-{cfg.seed:06d}",
        num_frames=cfg.n_frames,
        fps=cfg.fps,
        query=query,
        tokens=tokens,
        mentions=mentions,
        segment=segment,
        targets=targets,
    )

    # features: plant the direction u at the home cells of every frame
    planted = np.zeros(n_cells, dtype=bool)
    planted[cells] = True
    mention_slots = np.zeros(len(tokens), dtype=bool)
    for m in mentions:
        mention_slots[m.span[0] : m.span[1]] = True

    def grid_features() -> np.ndarray:
        feats = np.empty((cfg.n_frames, n_cells, cfg.dim))
        for f in range(cfg.n_frames):
            noise = _orthogonal_noise(rng, u, cfg.noise, n_cells)
            feats[f] = noise
            feats[f, planted] += (1.0 + cfg.margin) * u
        return feats.reshape(cfg.n_frames, cfg.grid_h, cfg.grid_w, cfg.dim)

    appearance = grid_features()
    motion = grid_features()

    text = _orthogonal_noise(rng, u, cfg.noise * 0.25, len(tokens))
    text[mention_slots] = u + _orthogonal_noise(rng, u, cfg.noise * 0.5, int(mention_slots.sum()))

    bundle = FeatureBundle(appearance=appearance, motion=motion, text=text)
    _check_planted_separation(bundle, text, planted, cells)
    return bundle, record


def _check_planted_separation(bundle: FeatureBundle, text: np.ndarray, planted: np.ndarray, cells: np.ndarray) -> None:
    """Postcondition: planted cells strictly dominate the cosine ranking
    against the pooled text feature, for every frame and both grids."""
    ref = text.mean(axis=0)
    ref = ref / np.linalg.norm(ref)
    for grid in (bundle.appearance, bundle.motion):
        flat = grid.reshape(grid.shape[0], -1, grid.shape[3])
        norms = np.linalg.norm(flat, axis=2)
        norms[norms == 0] = 1.0
        cos = (flat @ ref) / norms
        worst_planted = cos[:, planted].min(axis=1)
        best_other = cos[:, ~planted].max(axis=1) if (~planted).any() else np.full(grid.shape[0], -np.inf)
        if not (worst_planted > best_other).all():
            raise AssertionError("planted-cell cosine separation failed; lower noise or raise margin")

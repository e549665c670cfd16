"""Tube construction from per-frame predictions.

Per-frame candidates are chained across consecutive frames by solving an
assignment on box overlap and class-distribution agreement, trimmed to
the decoded temporal segment, classified by their averaged class
distribution, and finally filtered against the query's object mentions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tubeground.assignment import build_link_cost, solve_assignment
from tubeground.geometry import check_segment

__all__ = [
    "Tubelet",
    "Tube",
    "link_frames",
    "trim_and_classify",
    "filter_tubelets",
    "build_tubes",
]


@dataclass
class Tubelet:
    """A chained box sequence over consecutive frames, one candidate object."""

    frames: np.ndarray       # [n] consecutive frame indices
    boxes: np.ndarray        # [n, 4]
    class_dists: np.ndarray  # [n, S]
    agg_dist: np.ndarray | None = None  # mean distribution after trimming
    class_slot: int | None = None       # argmax of agg_dist (ties: lowest index)


@dataclass
class Tube:
    """Final output: one grounded object with its identity and box track."""

    class_word: str
    span: tuple       # token span of the mention, end exclusive
    segment: tuple    # inclusive frame segment the boxes cover
    frames: np.ndarray
    boxes: np.ndarray

    def box_at(self, frame: int) -> np.ndarray | None:
        idx = np.searchsorted(self.frames, frame)
        if idx < len(self.frames) and self.frames[idx] == frame:
            return self.boxes[idx]
        return None


def link_frames(boxes: np.ndarray, class_dists: np.ndarray) -> list:
    """Chain the N_q per-frame candidates into N_q full-length tubelets.

    For each consecutive frame pair the linking assignment is solved and
    composed transitively from frame 0, so tubelet j starts at candidate j
    of frame 0 and follows its matches forward.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    class_dists = np.asarray(class_dists, dtype=np.float64)
    n_v, n_q = boxes.shape[:2]
    slots = np.empty((n_v, n_q), dtype=np.intp)  # slots[t, j] = candidate of tubelet j at frame t
    slots[0] = np.arange(n_q)
    for t in range(n_v - 1):
        cost = build_link_cost(boxes[t], class_dists[t], boxes[t + 1], class_dists[t + 1])
        assign = solve_assignment(cost)
        nxt = np.empty(n_q, dtype=np.intp)
        nxt[assign.rows] = assign.cols
        slots[t + 1] = nxt[slots[t]]
    frames = np.arange(n_v)
    return [
        Tubelet(
            frames=frames.copy(),
            boxes=boxes[frames, slots[:, j]],
            class_dists=class_dists[frames, slots[:, j]],
        )
        for j in range(n_q)
    ]


def trim_and_classify(tubelets: list, segment) -> list:
    """Drop boxes outside the segment, then classify by the averaged
    distribution (argmax, ties toward the lowest slot)."""
    start, end = check_segment(segment)
    trimmed = []
    for t in tubelets:
        keep = (t.frames >= start) & (t.frames <= end)
        if not keep.any():
            raise ValueError(f"segment ({start}, {end}) leaves no frames in the tubelet")
        frames = t.frames[keep]
        dists = t.class_dists[keep]
        agg = dists.mean(axis=0)
        trimmed.append(
            Tubelet(
                frames=frames,
                boxes=t.boxes[keep],
                class_dists=dists,
                agg_dist=agg,
                class_slot=int(np.argmax(agg)),
            )
        )
    return trimmed


def filter_tubelets(tubelets: list, mentions: list, n_class_slots: int) -> list:
    """Keep tubelets whose resolved slot names an object mentioned in the
    query; everything else (including no-object) is dropped.

    ``mentions`` holds objects with ``class_word`` and token ``span``
    (end exclusive); a slot matches the first span containing it. The
    no-object slot is index ``n_class_slots``.
    """
    tubes = []
    for t in tubelets:
        if t.class_slot is None:
            raise ValueError("tubelets must be classified before filtering")
        if t.class_slot >= n_class_slots:
            continue  # no-object
        for m in mentions:
            if m.span[0] <= t.class_slot < m.span[1]:
                tubes.append(
                    Tube(
                        class_word=m.class_word,
                        span=(m.span[0], m.span[1]),
                        segment=(int(t.frames[0]), int(t.frames[-1])),
                        frames=t.frames,
                        boxes=t.boxes,
                    )
                )
                break
    return tubes


def filter_tubelets_by_vocab(tubelets: list, mentions: list, vocab: list) -> list:
    """Filtering for the direct-class head: slots index a class vocabulary
    instead of token positions; kept iff the slot's word is mentioned."""
    wanted = {m.class_word: m for m in mentions}
    tubes = []
    for t in tubelets:
        if t.class_slot is None:
            raise ValueError("tubelets must be classified before filtering")
        if t.class_slot >= len(vocab):
            continue  # no-object
        word = vocab[t.class_slot]
        m = wanted.get(word)
        if m is not None:
            tubes.append(
                Tube(
                    class_word=word,
                    span=(m.span[0], m.span[1]),
                    segment=(int(t.frames[0]), int(t.frames[-1])),
                    frames=t.frames,
                    boxes=t.boxes,
                )
            )
    return tubes


def build_tubes(boxes: np.ndarray, class_dists: np.ndarray, segment, mentions: list, n_class_slots: int, vocab: list | None = None) -> list:
    """link -> trim -> classify -> filter."""
    tubelets = link_frames(boxes, class_dists)
    tubelets = trim_and_classify(tubelets, segment)
    if vocab is not None:
        return filter_tubelets_by_vocab(tubelets, mentions, vocab)
    return filter_tubelets(tubelets, mentions, n_class_slots)

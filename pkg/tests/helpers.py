"""Shared test utilities: independent oracles and fixture builders.

The oracles here are deliberately naive (enumeration, rasterization,
loops) and never call the code paths they are used to check.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def brute_force_assignment(cost: np.ndarray):
    """Minimum-cost matching by full enumeration; rows/cols <= ~8.

    Returns (pairs, total) where pairs is the row-sorted list of the
    lexicographically smallest optimal matching and total its exact sum.
    """
    cost = np.asarray(cost, dtype=np.float64)
    m, n = cost.shape
    k = min(m, n)
    best_total = None
    best_pairs = None
    for rows in itertools.combinations(range(m), k):
        for cols in itertools.permutations(range(n), k):
            pairs = sorted(zip(rows, cols))
            total = math.fsum(cost[r, c] for r, c in pairs)
            key = [x for p in pairs for x in p]
            if best_total is None or total < best_total or (total == best_total and key < best_key):
                best_total = total
                best_pairs = pairs
                best_key = key
    return best_pairs, best_total


def rasterized_iou(a, b, cells: int = 400) -> float:
    """Box IoU by counting cells of a fine grid; boxes are xyxy."""
    xs = sorted({a[0], a[2], b[0], b[2]})
    ys = sorted({a[1], a[3], b[1], b[3]})
    lo_x, hi_x = xs[0], xs[-1]
    lo_y, hi_y = ys[0], ys[-1]
    grid_x = np.linspace(lo_x, hi_x, cells + 1)
    grid_y = np.linspace(lo_y, hi_y, cells + 1)
    cx = (grid_x[:-1] + grid_x[1:]) / 2
    cy = (grid_y[:-1] + grid_y[1:]) / 2
    area = (grid_x[1] - grid_x[0]) * (grid_y[1] - grid_y[0])

    def mask(box):
        mx = (cx >= box[0]) & (cx <= box[2])
        my = (cy >= box[1]) & (cy <= box[3])
        return mx[:, None] & my[None, :]

    ma, mb = mask(a), mask(b)
    inter = np.count_nonzero(ma & mb) * area
    union = np.count_nonzero(ma | mb) * area
    return inter / union if union else 0.0


def segment_iou_by_enumeration(a, b) -> float:
    """Temporal IoU over explicit inclusive frame sets."""
    sa = set(range(a[0], a[1] + 1))
    sb = set(range(b[0], b[1] + 1))
    union = sa | sb
    return len(sa & sb) / len(union) if union else 0.0


def random_box(rng: np.random.Generator) -> np.ndarray:
    """A valid (cx, cy, w, h) box comfortably inside the unit square."""
    c = rng.uniform(0.2, 0.8, size=2)
    s = rng.uniform(0.05, 0.35, size=2)
    return np.concatenate([c, s])


def inject_ground_truth(record, n_queries: int, n_slots: int):
    """Predictions that reproduce the annotation exactly.

    Target j's query carries its ground-truth boxes over the segment
    (extended by the boundary boxes outside it) and a one-hot class at its
    mention's first token; the remaining queries get distinct parked boxes
    and one-hot no-object. Returns (boxes [N_v, N_q, 4], dists, temporal
    probs one-hot at the segment boundaries).
    """
    n_v = record.num_frames
    start, end = record.segment
    boxes = np.zeros((n_v, n_queries, 4))
    dists = np.zeros((n_v, n_queries, n_slots + 1))
    for j, target in enumerate(record.targets):
        slot = record.mentions[target.mention].span[0]
        for f in range(n_v):
            src = min(max(f, start), end)
            boxes[f, j] = target.boxes[src]
        dists[:, j, slot] = 1.0
    for j in range(len(record.targets), n_queries):
        parked = np.array([0.02 + 0.9 * j / n_queries, 0.02, 0.01, 0.01])
        boxes[:, j] = parked
        dists[:, j, n_slots] = 1.0
    temporal = np.zeros((n_v, 2))
    temporal[start, 0] = 1.0
    temporal[end, 1] = 1.0
    return boxes, dists, temporal

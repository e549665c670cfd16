"""Exact rectangular assignment plus the cost matrices built on top of it:
prediction-to-ground-truth matching costs for training and frame-to-frame
linking costs for tube construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from tubeground import geometry

__all__ = [
    "Assignment",
    "solve_assignment",
    "build_train_cost",
    "build_link_cost",
]


@dataclass
class Assignment:
    """A minimum-cost partial bijection of size min(rows, cols)."""

    rows: np.ndarray
    cols: np.ndarray
    total: float

    def pairs(self) -> list:
        return list(zip(self.rows.tolist(), self.cols.tolist()))


def _opt(work: np.ndarray, rows, cols) -> float:
    if not rows or not cols:
        return 0.0
    sub = work[np.ix_(rows, cols)]
    ri, ci = linear_sum_assignment(sub)
    return float(sub[ri, ci].sum())


def solve_assignment(cost) -> Assignment:
    """Solve the rectangular assignment problem exactly.

    Returns the minimum-total matching of size min(m, n). When several
    matchings attain the optimum, the row-sorted pair list that is
    lexicographically smallest is returned, so results are deterministic
    under ties. Negative entries are shift-normalized internally, which
    does not change the optimizer because every size-min(m, n) matching
    shifts by the same constant.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ValueError(f"cost matrix must be 2-D and non-empty, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix entries must be finite")
    m, n = c.shape
    k = min(m, n)

    low = c.min()
    work = c - low if low < 0 else c

    rows = list(range(m))
    cols = list(range(n))
    target = _opt(work, rows, cols)
    pairs = []
    while len(pairs) < k:
        need = k - len(pairs)
        tol = 1e-9 * (1.0 + abs(target))
        # witness pairing for the current subproblem, used as a fallback
        sub = work[np.ix_(rows, cols)]
        ri, ci = linear_sum_assignment(sub)
        witness = sorted((rows[a], cols[b]) for a, b in zip(ri, ci))
        wr, wc = witness[0]

        if len(rows) == need:
            # every remaining row is matched, so the next row is forced
            candidates = [(rows[0], col) for col in cols if (rows[0], col) <= (wr, wc)]
        else:
            candidates = [
                (row, col) for row in rows for col in cols if (row, col) <= (wr, wc)
            ]
        for row, col in candidates:
            if (row, col) == (wr, wc):
                break
            rest_rows = [r for r in rows if r > row]
            rest_cols = [x for x in cols if x != col]
            if len(rest_rows) < need - 1:
                continue
            if work[row, col] + _opt_sized(work, rest_rows, rest_cols, need - 1) <= target + tol:
                break
        else:  # pragma: no cover - witness always terminates the scan
            row, col = wr, wc
        pairs.append((row, col))
        rows = [r for r in rows if r > row]
        cols = [x for x in cols if x != col]
        target = _opt_sized(work, rows, cols, k - len(pairs))

    pairs.sort()
    rs = np.array([p[0] for p in pairs], dtype=np.intp)
    cs = np.array([p[1] for p in pairs], dtype=np.intp)
    total = math.fsum(c[r, col] for r, col in pairs)
    return Assignment(rows=rs, cols=cs, total=total)


def _opt_sized(work: np.ndarray, rows, cols, need: int) -> float:
    if need == 0:
        return 0.0
    return _opt(work, rows, cols)


def build_train_cost(
    boxes: np.ndarray,
    class_probs: np.ndarray,
    gt_boxes: np.ndarray,
    gt_slots: np.ndarray,
    iou_cost_weight: float = 3.0,
    l1_cost_weight: float = 5.0,
    class_cost_weight: float = 1.0,
) -> np.ndarray:
    """Matching cost between predicted queries and ground-truth targets.

    boxes is [F, N_q, 4] (cx, cy, w, h) and class_probs [F, N_q, S] over
    the frames being matched; gt_boxes is [N*, F, 4] with gt_slots [N*]
    giving each target's class slot. Entry (j, t) combines the per-frame
    coordinate L1, the (1 - GIoU) overlap cost, and (1 - p[slot_t]),
    averaged over the F frames.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    class_probs = np.asarray(class_probs, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    gt_slots = np.asarray(gt_slots, dtype=np.intp)
    n_frames, n_q = boxes.shape[:2]
    n_gt = gt_boxes.shape[0]
    if n_gt > n_q:
        raise ValueError(f"more ground-truth targets ({n_gt}) than queries ({n_q})")
    if gt_boxes.shape[1] != n_frames:
        raise ValueError("ground-truth track length does not match prediction frames")
    if np.any(gt_slots < 0) or np.any(gt_slots >= class_probs.shape[2]):
        raise ValueError("ground-truth class slot outside the class distribution")

    pred_xyxy = geometry.box_cxcywh_to_xyxy(boxes)            # [F, N_q, 4]
    gt_xyxy = geometry.box_cxcywh_to_xyxy(gt_boxes)           # [N*, F, 4]

    l1 = np.abs(boxes[:, :, None, :] - gt_boxes.transpose(1, 0, 2)[:, None, :, :]).sum(-1)
    giou = geometry.generalized_box_iou(
        pred_xyxy[:, :, None, :], gt_xyxy.transpose(1, 0, 2)[:, None, :, :]
    )
    conf = class_probs[:, :, gt_slots]                        # [F, N_q, N*]

    per_frame = l1_cost_weight * l1 + iou_cost_weight * (1.0 - giou) + class_cost_weight * (1.0 - conf)
    return per_frame.mean(axis=0)


def build_link_cost(
    boxes_a: np.ndarray,
    dists_a: np.ndarray,
    boxes_b: np.ndarray,
    dists_b: np.ndarray,
) -> np.ndarray:
    """Cost for linking frame t candidates to frame t+1 candidates.

    Entry (a, b) = (1 - IoU(box_a, box_b)) + 0.5 * L1(dist_a, dist_b);
    the distribution L1 is twice the total variation, so the entry spans
    [0, 2] with 2 for disjoint boxes carrying disjoint one-hot classes.
    """
    boxes_a = np.asarray(boxes_a, dtype=np.float64)
    boxes_b = np.asarray(boxes_b, dtype=np.float64)
    dists_a = np.asarray(dists_a, dtype=np.float64)
    dists_b = np.asarray(dists_b, dtype=np.float64)
    if boxes_a.shape != boxes_b.shape or dists_a.shape != dists_b.shape:
        raise ValueError("both frames must hold the same number of candidates")

    a_xyxy = geometry.box_cxcywh_to_xyxy(boxes_a)
    b_xyxy = geometry.box_cxcywh_to_xyxy(boxes_b)
    iou = geometry.box_iou(a_xyxy[:, None, :], b_xyxy[None, :, :])
    dist_l1 = np.abs(dists_a[:, None, :] - dists_b[None, :, :]).sum(-1)
    return (1.0 - iou) + 0.5 * dist_l1

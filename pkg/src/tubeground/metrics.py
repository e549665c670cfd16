"""Multi-object grounding metrics.

Per sample: temporal IoU of the predicted segment, and a spatio-temporal
score that averages per-frame box IoU over the ground-truth targets and
the frames where the segments intersect, normalized by the union of
segment frames. Aggregates: mean scores plus the fraction of samples
whose spatio-temporal score exceeds each threshold, overall and per
target-count subset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from tubeground import geometry
from tubeground.assignment import solve_assignment
from tubeground.dataio import AnnotationRecord, subset_of
from tubeground.tubes import Tube

__all__ = [
    "gt_tubes_from_record",
    "sample_tiou",
    "sample_viou",
    "SampleScore",
    "EvalReport",
    "aggregate",
]

DEFAULT_THRESHOLDS = (0.3, 0.5)


def gt_tubes_from_record(record: AnnotationRecord) -> list:
    """Ground-truth tubes for scoring: one per annotated target."""
    tubes = []
    for t in record.targets:
        frames = np.array(sorted(t.boxes), dtype=np.intp)
        boxes = np.stack([t.boxes[f] for f in frames])
        mention = record.mentions[t.mention]
        tubes.append(
            Tube(
                class_word=t.class_word,
                span=(mention.span[0], mention.span[1]),
                segment=(int(frames[0]), int(frames[-1])),
                frames=frames,
                boxes=boxes,
            )
        )
    return tubes


def sample_tiou(gt_segment, pred_segment) -> float:
    return geometry.segment_iou(gt_segment, pred_segment)


def _pair_overlap(gt: Tube, pred: Tube, inter_frames: np.ndarray) -> float:
    """Summed per-frame IoU over the intersection frames; frames where
    either tube lacks a box contribute 0."""
    total = 0.0
    for f in inter_frames:
        pbox = pred.box_at(int(f))
        gbox = gt.box_at(int(f))
        if pbox is None or gbox is None:
            continue
        total += float(
            geometry.box_iou(
                geometry.box_cxcywh_to_xyxy(gbox), geometry.box_cxcywh_to_xyxy(pbox)
            )
        )
    return total


def sample_viou(gt_tubes: list, gt_segment, pred_tubes: list, pred_segment) -> float:
    """Spatio-temporal IoU of one sample.

    Ground-truth tubes are paired one-to-one with predicted tubes of the
    same class word so that the summed per-pair overlap is maximal
    (deterministic assignment); unpaired ground truth contributes zero.
    The denominator is the union of segment frame sets; only intersection
    frames contribute box IoU.
    """
    if not gt_tubes:
        raise ValueError("need at least one ground-truth tube")
    g0, g1 = geometry.check_segment(gt_segment)
    inter = 0
    union = g1 - g0 + 1
    inter_frames = np.empty(0, dtype=np.intp)
    if pred_segment is not None:
        p0, p1 = geometry.check_segment(pred_segment)
        lo, hi = max(g0, p0), min(g1, p1)
        inter = max(0, hi - lo + 1)
        union = (g1 - g0 + 1) + (p1 - p0 + 1) - inter
        if inter:
            inter_frames = np.arange(lo, hi + 1)

    n_gt = len(gt_tubes)
    per_target = np.zeros(n_gt)
    if inter and pred_tubes:
        overlap = np.zeros((n_gt, len(pred_tubes)))
        compatible = np.zeros_like(overlap, dtype=bool)
        for i, g in enumerate(gt_tubes):
            for k, p in enumerate(pred_tubes):
                if g.class_word == p.class_word:
                    compatible[i, k] = True
                    overlap[i, k] = _pair_overlap(g, p, inter_frames)
        # minimize -overlap over class-compatible pairs; incompatible pairs
        # cost 0, the same as leaving the ground truth unpaired
        cost = np.where(compatible, -overlap, 0.0)
        assign = solve_assignment(cost)
        for i, k in assign.pairs():
            if compatible[i, k]:
                per_target[i] = overlap[i, k]
    return math.fsum(per_target) / (union * n_gt)


@dataclass
class SampleScore:
    video_id: str
    tiou: float
    viou: float
    target_count: int


@dataclass
class EvalReport:
    n_samples: int
    mean_tiou: float
    mean_viou: float
    viou_at: dict                      # threshold -> ratio of samples above it
    subsets: dict = field(default_factory=dict)  # name -> {n, mean_tiou, mean_viou, viou_at}

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "mean_tiou": self.mean_tiou,
            "mean_viou": self.mean_viou,
            "viou_at": {f"{r:g}": v for r, v in sorted(self.viou_at.items())},
            "subsets": {
                name: {
                    "n": sub["n"],
                    "mean_tiou": sub["mean_tiou"],
                    "mean_viou": sub["mean_viou"],
                    "viou_at": {f"{r:g}": v for r, v in sorted(sub["viou_at"].items())},
                }
                for name, sub in self.subsets.items()
            },
        }

    def lines(self) -> list:
        def fmt(name, n, tiou, viou, at):
            cols = "  ".join(f"viou@{r:g} {v:.4f}" for r, v in sorted(at.items()))
            return f"{name:<8} n={n:<5} m_tiou {tiou:.4f}  m_viou {viou:.4f}  {cols}"

        out = [fmt("full", self.n_samples, self.mean_tiou, self.mean_viou, self.viou_at)]
        for name in ("low", "medium", "high"):
            sub = self.subsets.get(name)
            if sub and sub["n"]:
                out.append(fmt(name, sub["n"], sub["mean_tiou"], sub["mean_viou"], sub["viou_at"]))
        return out


def _reduce(scores: list, thresholds) -> tuple:
    n = len(scores)
    mean_tiou = math.fsum(s.tiou for s in scores) / n
    mean_viou = math.fsum(s.viou for s in scores) / n
    at = {float(r): sum(1 for s in scores if s.viou > r) / n for r in thresholds}
    return mean_tiou, mean_viou, at


def aggregate(scores: list, thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Aggregate per-sample scores; samples are sorted by video id first so
    the reduction is independent of processing order."""
    if not scores:
        raise ValueError("cannot aggregate an empty score list")
    scores = sorted(scores, key=lambda s: s.video_id)
    mean_tiou, mean_viou, at = _reduce(scores, thresholds)
    subsets = {}
    for name in ("low", "medium", "high"):
        group = [s for s in scores if subset_of(s.target_count) == name]
        if group:
            t, v, a = _reduce(group, thresholds)
            subsets[name] = {"n": len(group), "mean_tiou": t, "mean_viou": v, "viou_at": a}
        else:
            subsets[name] = {"n": 0, "mean_tiou": 0.0, "mean_viou": 0.0, "viou_at": {float(r): 0.0 for r in thresholds}}
    return EvalReport(
        n_samples=len(scores),
        mean_tiou=mean_tiou,
        mean_viou=mean_viou,
        viou_at=at,
        subsets=subsets,
    )

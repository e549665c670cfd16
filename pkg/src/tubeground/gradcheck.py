"""Finite-difference verification of the analytic loss gradients.

Random instances are generated from a seed; for each, a subset of box
coordinates, class logits, and temporal logits is perturbed with central
differences and compared against the closed-form gradients, per loss
term. The matching is solved once per instance and held fixed during
differencing (the assignment is piecewise constant in the predictions).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tubeground.assignment import build_train_cost, solve_assignment
from tubeground.losses import GroundTruthSample, LossWeights, hungarian_loss, kl_temporal_loss
from tubeground.nn import softmax

__all__ = ["GradcheckReport", "run_gradcheck"]

TERMS = ("overlap", "coord_l1", "classification", "kl_temporal")


@dataclass
class GradcheckReport:
    tolerance: float
    max_rel: dict = field(default_factory=dict)  # term -> worst relative error

    @property
    def ok(self) -> bool:
        return all(v < self.tolerance for v in self.max_rel.values())

    def lines(self) -> list:
        out = []
        for term in TERMS:
            err = self.max_rel.get(term, float("nan"))
            status = "ok" if err < self.tolerance else "FAIL"
            out.append(f"{term:<16} max rel err {err:.3e}  [{status}]")
        out.append(f"gradcheck {'passed' if self.ok else 'FAILED'} at tolerance {self.tolerance:g}")
        return out


def _rel(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-6)


def _random_instance(rng: np.random.Generator):
    n_v = int(rng.integers(4, 7))
    n_q = int(rng.integers(4, 7))
    n_slots = int(rng.integers(5, 9))         # includes the no-object slot
    n_gt = int(rng.integers(1, min(4, n_q) + 1))

    def boxes(shape):
        c = rng.uniform(0.2, 0.8, size=shape[:-1] + (2,))
        s = rng.uniform(0.05, 0.35, size=shape[:-1] + (2,))
        return np.concatenate([c, s], axis=-1)

    pred_boxes = boxes((n_v, n_q, 4))
    class_logits = rng.normal(size=(n_v, n_q, n_slots))
    temporal_logits = rng.normal(size=(n_v, 2))

    start = int(rng.integers(0, n_v - 1))
    end = int(rng.integers(start, n_v))
    gt = GroundTruthSample(
        segment=(start, end),
        boxes=boxes((n_gt, end - start + 1, 4)),
        class_slots=rng.integers(0, n_slots - 1, size=n_gt).astype(np.intp),
    )
    return pred_boxes, class_logits, temporal_logits, gt


def run_gradcheck(
    seed: int = 0,
    instances: int = 100,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    probes_per_tensor: int = 24,
    weights: LossWeights = LossWeights(),
    corrupt: bool = False,
) -> GradcheckReport:
    """Compare analytic gradients to central differences.

    ``corrupt`` scales one analytic gradient as a negative control, which
    must make the check fail.
    """
    rng = np.random.default_rng(seed)
    worst = {term: 0.0 for term in TERMS}

    for _ in range(instances):
        pred_boxes, class_logits, temporal_logits, gt = _random_instance(rng)
        frames = gt.frames

        def spatial(boxes_in, logits_in, assign):
            probs = softmax(logits_in, axis=-1)
            return hungarian_loss(
                boxes_in, probs, gt, assign,
                weights.iou_cost, weights.l1_cost, weights.class_cost,
                noobj_weight=weights.noobj,
            )

        cost = build_train_cost(
            pred_boxes[frames], softmax(class_logits, axis=-1)[frames],
            gt.boxes, gt.class_slots,
            weights.iou_cost, weights.l1_cost, weights.class_cost,
        )
        assign = solve_assignment(cost)
        base = spatial(pred_boxes, class_logits, assign)
        grad_overlap = base.grad_boxes_overlap.copy()
        grad_l1 = base.grad_boxes_l1.copy()
        grad_class = base.grad_class_logits.copy()
        if corrupt:
            grad_overlap *= 1.05

        flat_idx = rng.choice(pred_boxes.size, size=min(probes_per_tensor, pred_boxes.size), replace=False)
        for idx in flat_idx:
            loc = np.unravel_index(idx, pred_boxes.shape)
            for term, grad in (("overlap", grad_overlap), ("coord_l1", grad_l1)):
                plus = pred_boxes.copy()
                plus[loc] += h
                minus = pred_boxes.copy()
                minus[loc] -= h
                fd = (
                    getattr(spatial(plus, class_logits, assign), term)
                    - getattr(spatial(minus, class_logits, assign), term)
                ) / (2 * h)
                worst[term] = max(worst[term], _rel(grad[loc], fd))

        flat_idx = rng.choice(class_logits.size, size=min(probes_per_tensor, class_logits.size), replace=False)
        for idx in flat_idx:
            loc = np.unravel_index(idx, class_logits.shape)
            plus = class_logits.copy()
            plus[loc] += h
            minus = class_logits.copy()
            minus[loc] -= h
            fd = (
                spatial(pred_boxes, plus, assign).classification
                - spatial(pred_boxes, minus, assign).classification
            ) / (2 * h)
            worst["classification"] = max(worst["classification"], _rel(grad_class[loc], fd))

        kl = kl_temporal_loss(softmax(temporal_logits, axis=0), gt.segment)
        grad_temporal = kl.grad_logits.copy()
        if corrupt:
            grad_temporal *= 1.05
        for idx in range(temporal_logits.size):
            loc = np.unravel_index(idx, temporal_logits.shape)
            plus = temporal_logits.copy()
            plus[loc] += h
            minus = temporal_logits.copy()
            minus[loc] -= h

            def value(logits):
                r = kl_temporal_loss(softmax(logits, axis=0), gt.segment)
                return r.start + r.end

            fd = (value(plus) - value(minus)) / (2 * h)
            worst["kl_temporal"] = max(worst["kl_temporal"], _rel(grad_temporal[loc], fd))

    return GradcheckReport(tolerance=tolerance, max_rel=worst)

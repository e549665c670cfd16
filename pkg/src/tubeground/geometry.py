"""Box and segment primitives: format conversion, IoU/GIoU, temporal IoU.

Boxes are stored as (cx, cy, w, h) in normalized [0, 1] image units; the
corner form (x0, y0, x1, y1) exists as a conversion target. Temporal
segments are inclusive integer frame intervals [start, end].
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "box_cxcywh_to_xyxy",
    "box_xyxy_to_cxcywh",
    "box_iou",
    "generalized_box_iou",
    "check_segment",
    "segment_iou",
]


def _as_boxes(b) -> np.ndarray:
    arr = np.asarray(b, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[-1] != 4:
        raise ValueError(f"expected boxes with last dimension 4, got shape {arr.shape}")
    return arr


def box_cxcywh_to_xyxy(b) -> np.ndarray:
    """Convert boxes from (cx, cy, w, h) to (x0, y0, x1, y1)."""
    b = _as_boxes(b)
    cx, cy, w, h = np.moveaxis(b, -1, 0)
    if np.any(w < 0) or np.any(h < 0):
        raise ValueError("invalid box: negative width or height")
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def box_xyxy_to_cxcywh(b) -> np.ndarray:
    """Convert boxes from (x0, y0, x1, y1) to (cx, cy, w, h)."""
    b = _as_boxes(b)
    x0, y0, x1, y1 = np.moveaxis(b, -1, 0)
    if np.any(x1 < x0) or np.any(y1 < y0):
        raise ValueError("invalid box: corners out of order")
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def _check_xyxy(b: np.ndarray) -> None:
    if np.any(b[..., 2] < b[..., 0]) or np.any(b[..., 3] < b[..., 1]):
        raise ValueError("invalid box: corners out of order")


def box_iou(a, b) -> np.ndarray:
    """Elementwise IoU between boxes in (x0, y0, x1, y1) form.

    Leading dimensions broadcast, so pairwise matrices are obtained with
    ``box_iou(a[:, None], b[None, :])``. Degenerate (zero-area) pairs give
    0 unless the two corner tuples are identical, in which case 1.
    """
    a = _as_boxes(a)
    b = _as_boxes(b)
    _check_xyxy(a)
    _check_xyxy(b)

    lt = np.maximum(a[..., :2], b[..., :2])
    rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]

    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter

    identical = np.all(a == b, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.where(union > 0, iou, np.where(identical, 1.0, 0.0))


def generalized_box_iou(a, b) -> np.ndarray:
    """Elementwise GIoU between boxes in (x0, y0, x1, y1) form, in [-1, 1].

    GIoU = IoU - (hull - union) / hull, where hull is the smallest box
    enclosing both inputs. Equals IoU when the hull carries no empty area.
    """
    a = _as_boxes(a)
    b = _as_boxes(b)
    iou = box_iou(a, b)

    lt = np.minimum(a[..., :2], b[..., :2])
    rb = np.maximum(a[..., 2:], b[..., 2:])
    hull = (rb[..., 0] - lt[..., 0]) * (rb[..., 1] - lt[..., 1])

    inter_lt = np.maximum(a[..., :2], b[..., :2])
    inter_rb = np.minimum(a[..., 2:], b[..., 2:])
    wh = np.clip(inter_rb - inter_lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter

    with np.errstate(divide="ignore", invalid="ignore"):
        penalty = np.where(hull > 0, (hull - union) / np.where(hull > 0, hull, 1.0), 0.0)
    return iou - penalty


def check_segment(segment, n_frames: int | None = None) -> tuple[int, int]:
    """Validate an inclusive frame segment and return it as (start, end) ints."""
    try:
        start, end = segment
    except (TypeError, ValueError) as exc:
        raise ValueError(f"segment must be a (start, end) pair, got {segment!r}") from exc
    start = int(start)
    end = int(end)
    if start < 0 or end < start:
        raise ValueError(f"invalid segment ({start}, {end}): need 0 <= start <= end")
    if n_frames is not None and end >= n_frames:
        raise ValueError(f"segment ({start}, {end}) exceeds video length {n_frames}")
    return start, end


def segment_iou(a, b) -> float:
    """Temporal IoU of two inclusive frame segments, counted over frame sets."""
    a0, a1 = check_segment(a)
    b0, b1 = check_segment(b)
    inter = min(a1, b1) - max(a0, b0) + 1
    if inter <= 0:
        return 0.0
    union = (a1 - a0 + 1) + (b1 - b0 + 1) - inter
    return inter / union

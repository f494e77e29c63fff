"""Box arithmetic, IoU, negative-proposal matching and greedy NMS.

Boxes are axis-aligned rectangles in pixel coordinates, stored corner-form
(x1, y1, x2, y2) with x1 <= x2 and y1 <= y2. All operations are pure
functions; array variants operate on (N, 4) float arrays and are the fast
path used by the training loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle, corner form. Degenerate (zero-area) is legal."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise DataError(f"malformed box: {(self.x1, self.y1, self.x2, self.y2)}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def clipped(self, width: float, height: float) -> "Box":
        """Box intersected with the image rectangle [0, width] x [0, height]."""
        return Box(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )

    @staticmethod
    def from_xywh(x: float, y: float, w: float, h: float) -> "Box":
        return Box(x, y, x + w, y + h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1)


@dataclass(frozen=True)
class Proposal:
    """A region proposal: box, objectness in [0, 1], and the row index of
    its embedding in the companion region-embedding file."""

    box: Box
    objectness: float
    embedding_index: int


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    """Stack boxes into an (N, 4) float64 array."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


def proposals_to_arrays(proposals: Sequence[Proposal]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split proposals into (boxes (N,4), objectness (N,), embedding_index (N,))."""
    boxes = boxes_to_array([p.box for p in proposals])
    scores = np.array([p.objectness for p in proposals], dtype=np.float64)
    emb = np.array([p.embedding_index for p in proposals], dtype=np.int64)
    return boxes, scores, emb


def area_of(boxes: np.ndarray) -> np.ndarray:
    """Areas of an (N, 4) corner-form box array."""
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def pairwise_iou(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two corner-form box arrays.

    Args:
        boxes1: (N, 4) array.
        boxes2: (M, 4) array.

    Returns:
        (N, M) array of IoU values; 0 wherever the union is empty.
    """
    boxes1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    boxes2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(boxes1[:, None, 0], boxes2[None, :, 0])
    iy1 = np.maximum(boxes1[:, None, 1], boxes2[None, :, 1])
    ix2 = np.minimum(boxes1[:, None, 2], boxes2[None, :, 2])
    iy2 = np.minimum(boxes1[:, None, 3], boxes2[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    union = area_of(boxes1)[:, None] + area_of(boxes2)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a: Box, b: Box) -> float:
    """IoU of two boxes; 0 by convention when the union has zero area."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms_arrays(
    boxes: np.ndarray,
    scores: np.ndarray,
    iou_threshold: float,
    max_keep: int,
) -> np.ndarray:
    """Greedy highest-score-first NMS over array inputs.

    Ties on equal score are broken by lower original index, which makes the
    kept set deterministic across platforms.

    Returns:
        Indices of kept boxes, sorted by descending score.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ConfigurationError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if max_keep < 1:
        raise ConfigurationError(f"max_keep must be >= 1, got {max_keep}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    n = boxes.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)

    # Stable sort on -score keeps the lower index first among equal scores.
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    while order.size > 0 and len(keep) < max_keep:
        top = order[0]
        keep.append(int(top))
        if order.size == 1:
            break
        rest = order[1:]
        ious = pairwise_iou(boxes[top : top + 1], boxes[rest])[0]
        order = rest[ious < iou_threshold]
    return np.array(keep, dtype=np.int64)


def nms(proposals: Sequence[Proposal], iou_threshold: float, max_keep: int) -> list[int]:
    """Greedy NMS over proposals, scored by objectness. See nms_arrays."""
    boxes, scores, _ = proposals_to_arrays(proposals)
    return [int(i) for i in nms_arrays(boxes, scores, iou_threshold, max_keep)]


def match_negatives_arrays(
    boxes: np.ndarray,
    gt_boxes: np.ndarray,
    neg_iou_max: float,
) -> np.ndarray:
    """Indices of boxes whose max IoU against every gt box is < neg_iou_max.

    Ground truth is considered class-agnostically. With no ground truth every
    box is negative.
    """
    if not 0.0 <= neg_iou_max < 1.0:
        raise ConfigurationError(f"neg_iou_max must be in [0, 1), got {neg_iou_max}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if gt_boxes.shape[0] == 0:
        return np.arange(boxes.shape[0], dtype=np.int64)
    max_iou = pairwise_iou(boxes, gt_boxes).max(axis=1)
    return np.nonzero(max_iou < neg_iou_max)[0].astype(np.int64)


def match_negatives(
    proposals: Sequence[Proposal],
    gt_boxes: Sequence[Box],
    neg_iou_max: float,
) -> list[int]:
    """Negative-proposal indices: low overlap with all gt boxes."""
    boxes, _, _ = proposals_to_arrays(proposals)
    return [int(i) for i in match_negatives_arrays(boxes, boxes_to_array(gt_boxes), neg_iou_max)]

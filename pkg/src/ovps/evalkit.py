"""Detection evaluation: COCO-style average precision with a base/novel
breakdown, and zero-shot top-k accuracy measured at ground-truth boxes.

AP uses 101-point interpolation over IoU thresholds 0.50:0.05:0.95 with at
most 100 detections per image. Detections are ranked by descending score
with a fully intrinsic tie-break (image id, then box coordinates, then
class), so results are invariant to input permutation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embedstore import Dataset, RegionEmbeddingFile, TextBank, SPLIT_BASE, SPLIT_NOVEL
from .errors import ConfigurationError, DataError
from .geometry import Box, pairwise_iou
from .zeroshot import classify_batch

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS_PER_IMAGE = 100


@dataclass(frozen=True)
class Detection:
    """A scored class prediction; class_id refers to a dataset category."""

    image_id: int
    box: Box
    class_id: int
    score: float


@dataclass(frozen=True)
class EvalReport:
    ap50_novel: float
    ap50_base: float
    ap_all: float
    ar_all: float
    per_class: list[dict]

    def to_dict(self) -> dict:
        return {
            "ap50_novel": self.ap50_novel,
            "ap50_base": self.ap50_base,
            "ap_all": self.ap_all,
            "ar_all": self.ar_all,
            "per_class": self.per_class,
        }


def _canonical_order(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(
        dets,
        key=lambda d: (-d.score, d.image_id, d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.class_id),
    )


def _match_single_class(
    dets: list[Detection],
    gts_by_image: dict[int, np.ndarray],
    iou_thr: float,
) -> tuple[np.ndarray, int]:
    """Greedy highest-score-first matching; each gt matched at most once.

    Returns (per-detection true-positive flags, number of gts).
    """
    n_gt = sum(len(v) for v in gts_by_image.values())
    matched: dict[int, np.ndarray] = {
        img: np.zeros(len(v), dtype=bool) for img, v in gts_by_image.items()
    }
    tp = np.zeros(len(dets), dtype=bool)
    for i, det in enumerate(dets):
        gt_boxes = gts_by_image.get(det.image_id)
        if gt_boxes is None or len(gt_boxes) == 0:
            continue
        ious = pairwise_iou(det.box.as_array()[None, :], gt_boxes)[0]
        ious[matched[det.image_id]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_thr:
            matched[det.image_id][best] = True
            tp[i] = True
    return tp, n_gt


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> tuple[float, float]:
    """(101-point interpolated AP, max recall) from ordered match flags."""
    if n_gt == 0:
        return 0.0, 0.0
    if len(tp) == 0:
        return 0.0, 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # Precision envelope: best precision achievable at recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(interp.mean()), float(recall[-1])


def average_precision(
    detections: Sequence[Detection],
    gts: Sequence[tuple[int, Box]],
    iou_thr: float,
) -> float:
    """Single-class AP at one IoU threshold (class fields are ignored)."""
    gts_by_image: dict[int, list[Box]] = {}
    for image_id, box in gts:
        gts_by_image.setdefault(image_id, []).append(box)
    packed = {
        img: np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)
        for img, boxes in gts_by_image.items()
    }
    ordered = _canonical_order(detections)
    tp, n_gt = _match_single_class(ordered, packed, iou_thr)
    ap, _ = _interpolated_ap(tp, n_gt)
    return ap


def _cap_per_image(detections: Sequence[Detection], max_dets: int) -> list[Detection]:
    by_image: dict[int, list[Detection]] = {}
    for det in _canonical_order(detections):
        by_image.setdefault(det.image_id, []).append(det)
    capped: list[Detection] = []
    for img in sorted(by_image):
        capped.extend(by_image[img][:max_dets])
    return capped


def evaluate(
    detections: Sequence[Detection],
    dataset: Dataset,
    iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
    max_dets: int = MAX_DETECTIONS_PER_IMAGE,
) -> EvalReport:
    """Per-class AP over the eval split, aggregated by base/novel split.

    Classes without ground truth are excluded from every mean. Metrics are
    reported rounded to 4 decimals.
    """
    known = {c.id for c in dataset.categories}
    for det in detections:
        if det.class_id not in known:
            raise DataError(f"detection with unknown class id {det.class_id}")

    capped = _cap_per_image(detections, max_dets)
    eval_anns = dataset.eval_annotations()

    gts_by_class: dict[int, dict[int, list]] = {}
    for ann in eval_anns:
        gts_by_class.setdefault(ann.class_id, {}).setdefault(ann.image_id, []).append(
            [ann.box.x1, ann.box.y1, ann.box.x2, ann.box.y2]
        )

    dets_by_class: dict[int, list[Detection]] = {}
    for det in capped:
        dets_by_class.setdefault(det.class_id, []).append(det)

    per_class = []
    ap50 = {SPLIT_BASE: [], SPLIT_NOVEL: []}
    ap_means = []
    recalls = []
    for cat in dataset.categories:
        gt_images = gts_by_class.get(cat.id)
        if not gt_images:
            continue
        packed = {img: np.array(v, dtype=np.float64) for img, v in gt_images.items()}
        dets = dets_by_class.get(cat.id, [])
        aps = []
        class_recalls = []
        for thr in iou_thresholds:
            tp, n_gt = _match_single_class(dets, packed, thr)
            ap, max_recall = _interpolated_ap(tp, n_gt)
            aps.append(ap)
            class_recalls.append(max_recall)
        ap50_val = aps[0] if iou_thresholds[0] == 0.5 else average_precision(
            dets, [(img, Box(*b)) for img, v in gt_images.items() for b in v], 0.5
        )
        per_class.append(
            {
                "id": cat.id,
                "name": cat.name,
                "split": cat.split,
                "ap50": round(ap50_val, 4),
                "ap": round(float(np.mean(aps)), 4),
            }
        )
        ap50[cat.split].append(ap50_val)
        ap_means.append(float(np.mean(aps)))
        recalls.append(float(np.mean(class_recalls)))

    def _mean(values: list[float]) -> float:
        return round(float(np.mean(values)), 4) if values else 0.0

    return EvalReport(
        ap50_novel=_mean(ap50[SPLIT_NOVEL]),
        ap50_base=_mean(ap50[SPLIT_BASE]),
        ap_all=_mean(ap_means),
        ar_all=_mean(recalls),
        per_class=per_class,
    )


def oracle_box_topk(
    dataset: Dataset,
    embeddings: RegionEmbeddingFile,
    bank: TextBank,
    k: int,
) -> dict[str, float]:
    """Zero-shot top-k accuracy at ground-truth boxes, per base/novel split.

    Every eval annotation must have a region record at exactly its box.
    Ranking covers the real classes only (background is not a candidate).
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    bank_idx = {name: i for i, name in enumerate(bank.class_names)}
    lookup = embeddings.record_lookup()

    rows = []
    labels = []
    splits = []
    for ann in dataset.eval_annotations():
        cat = dataset.category_by_id(ann.class_id)
        if cat.name not in bank_idx:
            raise DataError(f"category {cat.name!r} missing from the text bank")
        key = (ann.image_id,) + tuple(float(np.float32(c)) for c in ann.box.as_array())
        row = lookup.get(key)
        if row is None:
            raise DataError(
                f"no region embedding at gt box {key[1:]} of image {ann.image_id}"
            )
        rows.append(row)
        labels.append(bank_idx[cat.name])
        splits.append(cat.split)

    hits = {SPLIT_BASE: 0, SPLIT_NOVEL: 0}
    totals = {SPLIT_BASE: 0, SPLIT_NOVEL: 0}
    if rows:
        probs = classify_batch(embeddings.vectors[np.array(rows)].astype(np.float64), bank)
        class_probs = probs[:, : bank.num_classes]
        take = min(k, bank.num_classes)
        topk = np.argsort(-class_probs, axis=1, kind="stable")[:, :take]
        for i, (label, split) in enumerate(zip(labels, splits)):
            totals[split] += 1
            if label in topk[i]:
                hits[split] += 1
    return {
        split: (hits[split] / totals[split] if totals[split] else 0.0)
        for split in (SPLIT_BASE, SPLIT_NOVEL)
    }

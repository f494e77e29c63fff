"""Pseudo-label mining from negative proposals and classification-target
rewriting for the objectness (RPN-style) and classification (RoI-style) heads.

Mining walks the negative proposals of an image, scores each against the
text bank, and keeps those that are confidently some novel class: score
above threshold and argmax neither base nor background. A random K of the
candidates become pseudo labels; their targets flip from background to
foreground (objectness head) or to the mined novel class (classification
head). Ground-truth-assigned targets are never touched, and box targets are
out of scope by contract: pseudo labels feed classification losses only.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .embedstore import RegionEmbeddingFile, TextBank, PROVENANCE_GT, PROVENANCE_PSEUDO
from .errors import ConfigurationError, ConsistencyError, DataError
from .geometry import (
    Box,
    Proposal,
    boxes_to_array,
    match_negatives_arrays,
    nms_arrays,
    pairwise_iou,
    proposals_to_arrays,
)
from .zeroshot import DEFAULT_TEMPERATURE, classify_batch

# Label conventions shared across training: class ids are bank indices >= 0.
BACKGROUND = -1
FOREGROUND = -2

SCORE_MODE_SOFTMAX = "softmax"
SCORE_MODE_COSINE = "cosine"


@dataclass(frozen=True)
class PseudoLabel:
    """A mined negative proposal promoted to a novel-class pseudo target."""

    proposal_index: int
    assigned_class: int
    frozen_score: float


@dataclass(frozen=True)
class ClassificationTarget:
    """Per-proposal training label with its provenance."""

    proposal_index: int
    label: int
    provenance: str = PROVENANCE_GT


@dataclass(frozen=True)
class PLMConfig:
    """Mining configuration. Defaults follow the standard operating point:
    score threshold 0.8 with K=4 selections per image."""

    threshold: float = 0.8
    k: int = 4
    neg_cap: int = 1000
    neg_iou_max: float = 0.5
    rpn_nms_iou: float = 0.7
    score_mode: str = SCORE_MODE_SOFTMAX
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigurationError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.score_mode not in (SCORE_MODE_SOFTMAX, SCORE_MODE_COSINE):
            raise ConfigurationError(f"unknown score_mode {self.score_mode!r}")


@dataclass(frozen=True)
class CandidateSet:
    """Mined candidates of one image, in proposal-index space."""

    indices: np.ndarray
    classes: np.ndarray
    scores: np.ndarray
    n_negatives: int
    n_capped: int


def _gather_vectors(embeddings: RegionEmbeddingFile, rows: np.ndarray) -> np.ndarray:
    if rows.size and (rows.min() < 0 or rows.max() >= len(embeddings)):
        raise DataError("proposal embedding_index outside the region file")
    return embeddings.vectors[rows]


def mine_candidates_arrays(
    objectness: np.ndarray,
    vectors: np.ndarray,
    bank: TextBank,
    threshold: float,
    score_mode: str = SCORE_MODE_SOFTMAX,
    temperature: float = DEFAULT_TEMPERATURE,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Candidate rows among the given negatives.

    Returns (local indices, novel class ids, scores). A row qualifies when
    its objectness is strictly positive, its best score over the full
    vocabulary (background included) exceeds threshold, and the argmax class
    is novel: base-class and background argmaxes are filtered out.
    """
    objectness = np.asarray(objectness, dtype=np.float64)
    if objectness.shape[0] == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0, dtype=np.float64)
    if score_mode == SCORE_MODE_SOFTMAX:
        scores = classify_batch(vectors, bank, temperature)
    elif score_mode == SCORE_MODE_COSINE:
        scores = np.asarray(vectors, dtype=np.float64) @ bank.vectors.T.astype(np.float64)
    else:
        raise ConfigurationError(f"unknown score_mode {score_mode!r}")
    best = scores.max(axis=1)
    arg = scores.argmax(axis=1)
    novel = np.zeros(bank.num_classes + 1, dtype=bool)
    novel[: bank.num_classes] = bank.novel_mask()
    keep = (objectness > 0) & (best > threshold) & novel[arg]
    idx = np.nonzero(keep)[0].astype(np.int64)
    return idx, arg[idx].astype(np.int64), best[idx]


def mine_candidates(
    negatives: Sequence[Proposal],
    embeddings: RegionEmbeddingFile,
    bank: TextBank,
    threshold: float,
    score_mode: str = SCORE_MODE_SOFTMAX,
    temperature: float = DEFAULT_TEMPERATURE,
) -> list[tuple[int, int, float]]:
    """Mine novel-class candidates from already-matched negative proposals.

    Returns (index into negatives, novel class id, score) triples.
    """
    _, objectness, emb_rows = proposals_to_arrays(negatives)
    vectors = _gather_vectors(embeddings, emb_rows)
    idx, cls, score = mine_candidates_arrays(
        objectness, vectors, bank, threshold, score_mode, temperature
    )
    return [(int(i), int(c), float(s)) for i, c, s in zip(idx, cls, score)]


def select_pseudo_labels(
    candidates: Sequence[tuple[int, int, float]],
    k: int,
    rng: np.random.Generator,
) -> list[PseudoLabel]:
    """Uniform sample without replacement of min(k, len(candidates)).

    Deterministic given the generator state; output sorted by proposal index.
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    n = len(candidates)
    if n == 0:
        return []
    take = min(k, n)
    chosen = sorted(int(i) for i in rng.choice(n, size=take, replace=False))
    return [
        PseudoLabel(
            proposal_index=int(candidates[i][0]),
            assigned_class=int(candidates[i][1]),
            frozen_score=float(candidates[i][2]),
        )
        for i in chosen
    ]


def _rewrite(
    targets: Sequence[ClassificationTarget],
    pseudo: Sequence[PseudoLabel],
    rpn_mode: bool,
) -> list[ClassificationTarget]:
    out = list(targets)
    position = {t.proposal_index: i for i, t in enumerate(out)}
    for label in pseudo:
        pos = position.get(label.proposal_index)
        if pos is None:
            raise ConsistencyError(f"pseudo label for unknown proposal {label.proposal_index}")
        current = out[pos]
        if current.label != BACKGROUND:
            raise ConsistencyError(
                f"pseudo label would overwrite a ground-truth target at proposal "
                f"{label.proposal_index}"
            )
        new_label = FOREGROUND if rpn_mode else label.assigned_class
        out[pos] = replace(current, label=new_label, provenance=PROVENANCE_PSEUDO)
    return out


def rewrite_rpn_targets(
    targets: Sequence[ClassificationTarget],
    pseudo: Sequence[PseudoLabel],
) -> list[ClassificationTarget]:
    """Flip selected background targets to foreground for the objectness head."""
    return _rewrite(targets, pseudo, rpn_mode=True)


def rewrite_roi_targets(
    targets: Sequence[ClassificationTarget],
    pseudo: Sequence[PseudoLabel],
) -> list[ClassificationTarget]:
    """Relabel selected background targets with their mined novel class."""
    return _rewrite(targets, pseudo, rpn_mode=False)


def build_target_arrays(
    boxes: np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    pos_iou: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Standard assignment: (rpn_labels, roi_labels) arrays for proposals.

    A proposal is positive when its IoU with some gt box reaches pos_iou;
    it takes the class of the best-overlapping gt (ties: lower gt index).
    Everything else is background.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    rpn = np.full(n, BACKGROUND, dtype=np.int64)
    roi = np.full(n, BACKGROUND, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if n == 0 or gt_boxes.shape[0] == 0:
        return rpn, roi
    ious = pairwise_iou(boxes, gt_boxes)
    best = ious.argmax(axis=1)
    positive = ious[np.arange(n), best] >= pos_iou
    rpn[positive] = FOREGROUND
    roi[positive] = np.asarray(gt_labels, dtype=np.int64)[best[positive]]
    return rpn, roi


def targets_from_arrays(labels: np.ndarray) -> list[ClassificationTarget]:
    """Wrap a label array into targets with ground-truth provenance."""
    return [
        ClassificationTarget(proposal_index=i, label=int(lab))
        for i, lab in enumerate(np.asarray(labels))
    ]


def prepare_image_candidates(
    boxes: np.ndarray,
    objectness: np.ndarray,
    vectors: np.ndarray,
    gt_boxes: np.ndarray,
    bank: TextBank,
    config: PLMConfig,
) -> CandidateSet:
    """Mining pipeline of one image: negatives -> NMS cap -> candidate filter.

    The NMS cap bounds the negatives sent to mining (redundant-overlap
    removal plus the hard cap); the resulting candidate set feeds one shared
    selection applied to both heads' targets.
    """
    negatives = match_negatives_arrays(boxes, gt_boxes, config.neg_iou_max)
    if negatives.size:
        kept = nms_arrays(
            boxes[negatives], objectness[negatives], config.rpn_nms_iou, config.neg_cap
        )
        capped = negatives[kept]
    else:
        capped = negatives
    idx, cls, score = mine_candidates_arrays(
        objectness[capped],
        vectors[capped],
        bank,
        config.threshold,
        config.score_mode,
        config.temperature,
    )
    return CandidateSet(
        indices=capped[idx],
        classes=cls,
        scores=score,
        n_negatives=int(negatives.size),
        n_capped=int(capped.size),
    )


def run_plm_step(
    proposals: Sequence[Proposal],
    gt_boxes: Sequence[Box],
    embeddings: RegionEmbeddingFile,
    bank: TextBank,
    config: PLMConfig,
    rng: np.random.Generator,
    rpn_targets: Sequence[ClassificationTarget],
    roi_targets: Sequence[ClassificationTarget],
) -> tuple[list[ClassificationTarget], list[ClassificationTarget], dict]:
    """One full pseudo-labeling step over an image's proposals.

    Composes negative matching, the NMS cap, candidate mining and random
    selection, then rewrites both target lists with the shared selection.
    Diagnostics report candidate and selection counts plus a per-class
    histogram of the selected labels.
    """
    boxes, objectness, emb_rows = proposals_to_arrays(proposals)
    vectors = _gather_vectors(embeddings, emb_rows)
    cands = prepare_image_candidates(
        boxes, objectness, vectors, boxes_to_array(gt_boxes), bank, config
    )
    triples = list(zip(cands.indices.tolist(), cands.classes.tolist(), cands.scores.tolist()))
    selected = select_pseudo_labels(triples, config.k, rng)
    hist: dict[str, int] = {}
    for lab in selected:
        name = bank.class_names[lab.assigned_class]
        hist[name] = hist.get(name, 0) + 1
    diagnostics = {
        "negatives": cands.n_negatives,
        "capped_negatives": cands.n_capped,
        "candidates": len(triples),
        "selected": len(selected),
        "per_class": hist,
    }
    return (
        rewrite_rpn_targets(rpn_targets, selected),
        rewrite_roi_targets(roi_targets, selected),
        diagnostics,
    )

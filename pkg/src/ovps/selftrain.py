"""Desk-scale detector training: a linear classification head over region
embeddings, trained by SGD on a class-weighted cross entropy, with dynamic
pseudo-label rewriting each iteration and score-fused prediction.

The head plays the role of the RoI classifier: its logits are
temperature * (W v + b) so that a head whose rows are initialized from the
text bank reproduces the frozen zero-shot scorer exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedstore import (
    Dataset,
    RegionEmbeddingFile,
    TextBank,
    SPLIT_NOVEL,
    read_ovpe,
    write_ovpe,
)
from .errors import ConfigurationError, DataError, NumericError, ShapeError
from .geometry import Box, Proposal, boxes_to_array, nms_arrays, proposals_to_arrays
from .plm import (
    BACKGROUND,
    CandidateSet,
    PLMConfig,
    build_target_arrays,
    prepare_image_candidates,
    select_pseudo_labels,
)
from .rng import BATCH_STREAM, PLM_STREAM, rng_stream
from .zeroshot import DEFAULT_TEMPERATURE, FusionConfig, classify_batch, fuse_scores_batch, softmax_rows


@dataclass
class LinearHead:
    """Linear classifier over region embeddings: one row per class plus a
    trailing background row."""

    weight: np.ndarray
    bias: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("weight must be (num_classes+1, dim) with matching bias")

    @property
    def num_slots(self) -> int:
        return int(self.weight.shape[0])

    @property
    def dim(self) -> int:
        return int(self.weight.shape[1])

    def logits(self, vectors: np.ndarray) -> np.ndarray:
        """(N, C+1) scaled logits for (N, dim) region vectors."""
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.shape[-1] != self.dim:
            raise ShapeError(f"vectors have dim {vectors.shape[-1]}, head has {self.dim}")
        return self.temperature * (vectors @ self.weight.T + self.bias)

    def copy(self) -> "LinearHead":
        return LinearHead(self.weight.copy(), self.bias.copy(), self.temperature)

    @staticmethod
    def from_bank(bank: TextBank, temperature: float = DEFAULT_TEMPERATURE) -> "LinearHead":
        """Head whose rows are the bank vectors and bias zero: its softmax
        equals the frozen scorer's output for any region."""
        return LinearHead(
            bank.vectors.astype(np.float64),
            np.zeros(bank.num_classes + 1, dtype=np.float64),
            temperature,
        )


def save_head(head: LinearHead, path: str | Path) -> None:
    """Serialize head rows as OVPE records (bias in the objectness slot)."""
    n = head.num_slots
    write_ovpe(
        path,
        image_ids=np.arange(n, dtype=np.uint64),
        boxes=np.zeros((n, 4), dtype=np.float32),
        objectness=head.bias.astype(np.float32),
        vectors=head.weight.astype(np.float32),
    )


def load_head(path: str | Path, temperature: float = DEFAULT_TEMPERATURE) -> LinearHead:
    _, _, bias, weight = read_ovpe(path)
    return LinearHead(weight.astype(np.float64), bias.astype(np.float64), temperature)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    iterations: int = 1000
    batch_size: int = 8
    background_weight: float = 0.9
    plm_enabled: bool = True
    plm: PLMConfig = field(default_factory=PLMConfig)
    seed: int = 0
    momentum: float = 0.0
    pos_iou: float = 0.5
    snapshot_interval: int = 200

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.background_weight <= 0:
            raise ConfigurationError("background_weight must be > 0")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigurationError("iterations must be >= 0 and batch_size >= 1")


def weighted_ce(
    logits: np.ndarray,
    target_class: int,
    class_weights: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Class-weighted cross entropy of one instance.

    Returns (loss, gradient wrt logits):
    loss = -w[t] * log softmax(logits)[t], grad = w[t] * (softmax - onehot).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if np.any(class_weights <= 0):
        raise ConfigurationError("class weights must be positive")
    if not 0 <= target_class < logits.shape[0]:
        raise DataError(f"target class {target_class} out of range")
    shifted = logits - logits.max()
    logsumexp = np.log(np.exp(shifted).sum())
    log_probs = shifted - logsumexp
    w = class_weights[target_class]
    loss = -w * log_probs[target_class]
    grad = np.exp(log_probs)
    grad[target_class] -= 1.0
    return float(loss), w * grad


def weighted_ce_batch(
    logits: np.ndarray,
    targets: np.ndarray,
    class_weights: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean weighted cross entropy over rows, with the gradient of the mean."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - logsumexp
    w = np.asarray(class_weights, dtype=np.float64)[targets]
    loss = float(np.mean(-w * log_probs[np.arange(n), targets]))
    grad = np.exp(log_probs)
    grad[np.arange(n), targets] -= 1.0
    grad *= (w / n)[:, None]
    return loss, grad


@dataclass
class _ImageCache:
    """Static per-image arrays shared by every training iteration."""

    image_id: int
    boxes: np.ndarray
    objectness: np.ndarray
    vectors: np.ndarray
    roi_labels: np.ndarray
    candidates: CandidateSet


def _bank_index_for_categories(dataset: Dataset, bank: TextBank) -> dict[int, int]:
    mapping = {}
    bank_idx = {name: i for i, name in enumerate(bank.class_names)}
    for cat in dataset.categories:
        if cat.name in bank_idx:
            mapping[cat.id] = bank_idx[cat.name]
    return mapping


def _build_image_caches(
    dataset: Dataset,
    embeddings: RegionEmbeddingFile,
    bank: TextBank,
    cfg: TrainConfig,
) -> list[_ImageCache]:
    cat_to_bank = _bank_index_for_categories(dataset, bank)
    train_by_image: dict[int, list] = {}
    for ann in dataset.train_annotations():
        if ann.class_id not in cat_to_bank:
            raise DataError(
                f"training annotation category {ann.class_id} has no bank entry"
            )
        train_by_image.setdefault(ann.image_id, []).append(ann)

    caches = []
    for image in dataset.images:
        rows = embeddings.rows_for_image(image.id)
        boxes = embeddings.boxes[rows].astype(np.float64)
        objectness = embeddings.objectness[rows].astype(np.float64)
        vectors = embeddings.vectors[rows].astype(np.float64)
        anns = train_by_image.get(image.id, [])
        gt_boxes = boxes_to_array([a.box for a in anns])
        gt_labels = np.array([cat_to_bank[a.class_id] for a in anns], dtype=np.int64)
        _, roi_labels = build_target_arrays(boxes, gt_boxes, gt_labels, cfg.pos_iou)
        candidates = prepare_image_candidates(
            boxes, objectness, vectors, gt_boxes, bank, cfg.plm
        )
        caches.append(
            _ImageCache(image.id, boxes, objectness, vectors, roi_labels, candidates)
        )
    return caches


def novel_recall(
    head: LinearHead,
    dataset: Dataset,
    embeddings: RegionEmbeddingFile,
    bank: TextBank,
) -> float:
    """Fraction of novel eval objects (with exact-box records) that the head
    argmaxes to their true class."""
    cat_to_bank = _bank_index_for_categories(dataset, bank)
    lookup = embeddings.record_lookup()
    rows = []
    labels = []
    for ann in dataset.eval_annotations():
        if dataset.split_of(ann.class_id) != SPLIT_NOVEL or ann.class_id not in cat_to_bank:
            continue
        key = (ann.image_id,) + tuple(float(np.float32(c)) for c in ann.box.as_array())
        row = lookup.get(key)
        if row is not None:
            rows.append(row)
            labels.append(cat_to_bank[ann.class_id])
    if not rows:
        return 0.0
    logits = head.logits(embeddings.vectors[np.array(rows)].astype(np.float64))
    return float(np.mean(logits.argmax(axis=1) == np.array(labels)))


def train(
    head: LinearHead,
    dataset: Dataset,
    embeddings: RegionEmbeddingFile,
    bank: TextBank,
    cfg: TrainConfig,
) -> tuple[LinearHead, list[dict]]:
    """SGD training with per-iteration pseudo-label rewriting.

    Each iteration samples a batch of images, assigns classification targets
    from the training annotations (positives at IoU >= pos_iou, rest
    background), optionally rewrites background targets via the mining
    pipeline, and takes one step on the batch-averaged weighted cross
    entropy. Fully deterministic for a given config and seed.
    """
    if not dataset.train_annotations():
        raise ConfigurationError("training split has no annotations")
    if bank.dim != embeddings.dim:
        raise ShapeError("bank and region file dimensionality differ")

    head = head.copy()
    caches = _build_image_caches(dataset, embeddings, bank, cfg)
    n_images = len(caches)
    background_slot = bank.num_classes
    class_weights = np.ones(bank.num_classes + 1, dtype=np.float64)
    class_weights[background_slot] = cfg.background_weight

    vel_w = np.zeros_like(head.weight)
    vel_b = np.zeros_like(head.bias)
    metrics: list[dict] = []

    for it in range(cfg.iterations):
        batch_rng = rng_stream(cfg.seed, BATCH_STREAM, it)
        take = min(cfg.batch_size, n_images)
        picked = np.sort(batch_rng.choice(n_images, size=take, replace=False))

        batch_vectors = []
        batch_labels = []
        pseudo_count = 0
        candidate_count = 0
        for ci in picked:
            cache = caches[ci]
            labels = cache.roi_labels
            candidate_count += len(cache.candidates.indices)
            if cfg.plm_enabled and len(cache.candidates.indices):
                triples = list(
                    zip(
                        cache.candidates.indices.tolist(),
                        cache.candidates.classes.tolist(),
                        cache.candidates.scores.tolist(),
                    )
                )
                rng = rng_stream(cfg.seed, PLM_STREAM, cache.image_id, it)
                selected = select_pseudo_labels(triples, cfg.plm.k, rng)
                if selected:
                    labels = labels.copy()
                    for lab in selected:
                        if labels[lab.proposal_index] == BACKGROUND:
                            labels[lab.proposal_index] = lab.assigned_class
                            pseudo_count += 1
            batch_vectors.append(cache.vectors)
            batch_labels.append(labels)

        vectors = np.concatenate(batch_vectors, axis=0)
        labels = np.concatenate(batch_labels, axis=0)
        if vectors.shape[0] == 0:
            metrics.append({"iteration": it, "loss": 0.0, "pseudo_count": 0, "candidates": 0})
            continue
        targets = np.where(labels == BACKGROUND, background_slot, labels)

        logits = head.logits(vectors)
        loss, grad_logits = weighted_ce_batch(logits, targets, class_weights)
        grad_w = head.temperature * (grad_logits.T @ vectors)
        grad_b = head.temperature * grad_logits.sum(axis=0)
        if cfg.momentum > 0:
            vel_w = cfg.momentum * vel_w + grad_w
            vel_b = cfg.momentum * vel_b + grad_b
            head.weight -= cfg.learning_rate * vel_w
            head.bias -= cfg.learning_rate * vel_b
        else:
            head.weight -= cfg.learning_rate * grad_w
            head.bias -= cfg.learning_rate * grad_b

        record = {
            "iteration": it,
            "loss": loss,
            "pseudo_count": pseudo_count,
            "candidates": candidate_count,
        }
        if cfg.snapshot_interval and (it + 1) % cfg.snapshot_interval == 0:
            record["novel_recall"] = novel_recall(head, dataset, embeddings, bank)
        metrics.append(record)
    return head, metrics


def predict(
    head: LinearHead,
    proposals: Sequence[Proposal],
    embeddings: RegionEmbeddingFile,
    bank: TextBank,
    fusion: FusionConfig,
    nms_iou: float = 0.5,
) -> list[tuple[Box, int, float]]:
    """Fused per-proposal predictions: (box, bank class index, fused score).

    The head probability p and the frozen scorer probability q are fused per
    class; proposals whose fused argmax is background are dropped, and
    per-class NMS removes duplicate boxes.
    """
    if not proposals:
        return []
    boxes, _, emb_rows = proposals_to_arrays(proposals)
    if emb_rows.size and (emb_rows.min() < 0 or emb_rows.max() >= len(embeddings)):
        raise DataError("proposal embedding_index outside the region file")
    vectors = embeddings.vectors[emb_rows].astype(np.float64)
    p = softmax_rows(head.logits(vectors))
    q = classify_batch(vectors, bank, head.temperature)
    fused = fuse_scores_batch(p, q, fusion, bank.novel_mask())
    arg = fused.argmax(axis=1)
    scores = fused[np.arange(len(proposals)), arg]
    keep = arg != bank.num_classes

    out: list[tuple[Box, int, float]] = []
    for cls in np.unique(arg[keep]):
        members = np.nonzero(keep & (arg == cls))[0]
        kept = members[nms_arrays(boxes[members], scores[members], nms_iou, len(members))]
        for i in kept:
            out.append((proposals[i].box, int(cls), float(scores[i])))
    out.sort(key=lambda d: (-d[2], d[0].x1, d[0].y1, d[0].x2, d[0].y2, d[1]))
    return out


def predict_dataset(
    head: LinearHead,
    dataset: Dataset,
    embeddings: RegionEmbeddingFile,
    bank: TextBank,
    fusion: FusionConfig,
    nms_iou: float = 0.5,
) -> list["Detection"]:
    """Fused predictions over every image, labeled with dataset category ids.

    Predictions of vocabulary entries that have no dataset category (e.g.
    external distractor names) are dropped: they cannot be evaluated or
    annotated against this dataset.
    """
    from .evalkit import Detection

    category_ids = dataset.category_id_by_name()
    out: list[Detection] = []
    for image in dataset.images:
        proposals = embeddings.proposals_for_image(image.id)
        if not proposals:
            continue
        for box, cls, score in predict(head, proposals, embeddings, bank, fusion, nms_iou):
            cat_id = category_ids.get(bank.class_names[cls])
            if cat_id is None:
                continue
            out.append(Detection(image.id, box, cat_id, score))
    return out

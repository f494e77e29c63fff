"""Offline refinement: harvest confident novel predictions of a trained head
over the training images as pseudo annotations, and retrain on the result.

The harvested labels join the training view alongside base ground truth, so
a second training round sees novel objects as regular positives. Original
annotations are never modified or removed, and the overlap filter makes the
harvest idempotent at a fixed head and config.
"""

from __future__ import annotations

from dataclasses import dataclass

from .embedstore import (
    Annotation,
    Dataset,
    RegionEmbeddingFile,
    TextBank,
    PROVENANCE_PSEUDO,
    SPLIT_NOVEL,
)
from .errors import ConfigurationError
from .geometry import boxes_to_array, pairwise_iou
from .selftrain import LinearHead, TrainConfig, predict, train
from .zeroshot import DEFAULT_TEMPERATURE, FusionConfig


@dataclass(frozen=True)
class RefinementConfig:
    """Harvest thresholds. A pseudo box overlapping an existing training
    annotation at IoU >= dedup_iou is dropped."""

    score_threshold: float = 0.9
    max_pseudo_per_image: int = 20
    dedup_iou: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 < self.score_threshold <= 1.0:
            raise ConfigurationError("score_threshold must be in (0, 1]")
        if not 0.0 < self.dedup_iou <= 1.0:
            raise ConfigurationError("dedup_iou must be in (0, 1]")
        if self.max_pseudo_per_image < 0:
            raise ConfigurationError("max_pseudo_per_image must be >= 0")


def offline_refine(
    dataset: Dataset,
    head: LinearHead,
    embeddings: RegionEmbeddingFile,
    bank: TextBank,
    fusion: FusionConfig,
    cfg: RefinementConfig,
) -> Dataset:
    """Append high-confidence novel predictions as pseudo annotations.

    Per image: run fused prediction, keep novel-class predictions at or
    above the score threshold, drop any overlapping a training-visible
    annotation, cap the survivors, and append them with pseudo provenance.
    """
    category_ids = dataset.category_id_by_name()
    novel_mask = bank.novel_mask()

    train_boxes_by_image: dict[int, list] = {}
    for ann in dataset.train_annotations():
        train_boxes_by_image.setdefault(ann.image_id, []).append(ann.box)

    appended: list[Annotation] = []
    for image in dataset.images:
        proposals = embeddings.proposals_for_image(image.id)
        if not proposals:
            continue
        harvested = []
        for box, bank_cls, score in predict(head, proposals, embeddings, bank, fusion):
            if score < cfg.score_threshold or not novel_mask[bank_cls]:
                continue
            cat_id = category_ids.get(bank.class_names[bank_cls])
            if cat_id is None:
                # Vocabulary entries outside the dataset cannot be annotated.
                continue
            harvested.append((box, cat_id, score))
        if not harvested:
            continue
        existing = boxes_to_array(train_boxes_by_image.get(image.id, []))
        kept = []
        for box, cat_id, score in sorted(harvested, key=lambda h: (-h[2], h[0].x1, h[0].y1)):
            if len(kept) >= cfg.max_pseudo_per_image:
                break
            if existing.shape[0]:
                overlap = pairwise_iou(box.as_array()[None, :], existing)[0].max()
                if overlap >= cfg.dedup_iou:
                    continue
            kept.append(Annotation(image.id, box, cat_id, PROVENANCE_PSEUDO, float(score)))
        appended.extend(kept)

    if not appended:
        return dataset.with_annotations(list(dataset.annotations))
    return dataset.with_annotations(list(dataset.annotations) + appended)


def retrain_with_refinement(
    dataset: Dataset,
    embeddings: RegionEmbeddingFile,
    bank: TextBank,
    cfg: TrainConfig,
    temperature: float = DEFAULT_TEMPERATURE,
) -> tuple[LinearHead, list[dict]]:
    """Train a fresh bank-initialized head on an (augmented) dataset.

    With an empty augmentation this is exactly a plain training rerun.
    """
    head = LinearHead.from_bank(bank, temperature)
    return train(head, dataset, embeddings, bank, cfg)

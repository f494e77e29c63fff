"""Open-vocabulary pseudo-label self-training toolkit.

Deterministic, file-driven pipeline: zero-shot region scoring against a text
bank, base/novel score fusion, dynamic pseudo-label mining from negative
proposals, self-training of a linear classification head, offline refinement,
and COCO-style evaluation with a base/novel breakdown.
"""

__version__ = "0.1.0"

from .embedstore import (
    Dataset,
    RegionEmbeddingFile,
    TextBank,
    generate_synthetic_world,
    ingest_coco,
    load_dataset,
    load_region_file,
    load_text_bank,
    save_dataset,
    save_region_file,
    save_text_bank,
)
from .evalkit import Detection, EvalReport, average_precision, evaluate, oracle_box_topk
from .geometry import Box, Proposal, iou, match_negatives, nms
from .plm import PLMConfig, PseudoLabel, run_plm_step
from .refine import RefinementConfig, offline_refine, retrain_with_refinement
from .selftrain import LinearHead, TrainConfig, predict, train, weighted_ce
from .zeroshot import FusionConfig, ScoreVector, classify, fuse_scores

__all__ = [
    "Box",
    "Dataset",
    "Detection",
    "EvalReport",
    "FusionConfig",
    "LinearHead",
    "PLMConfig",
    "Proposal",
    "PseudoLabel",
    "RefinementConfig",
    "RegionEmbeddingFile",
    "ScoreVector",
    "TextBank",
    "TrainConfig",
    "average_precision",
    "classify",
    "evaluate",
    "fuse_scores",
    "generate_synthetic_world",
    "ingest_coco",
    "iou",
    "load_dataset",
    "load_region_file",
    "load_text_bank",
    "match_negatives",
    "nms",
    "offline_refine",
    "oracle_box_topk",
    "predict",
    "retrain_with_refinement",
    "run_plm_step",
    "save_dataset",
    "save_region_file",
    "save_text_bank",
    "train",
    "weighted_ce",
]

"""Zero-shot region scoring against a text bank, and base/novel score fusion.

Scoring is a temperature-scaled softmax over cosine similarities between a
region embedding and every class vector (background included). Fusion takes
the per-class geometric mean of a trained head's probability and the frozen
scorer's probability, with split-dependent exponents.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedstore import TextBank
from .errors import ConfigurationError, DomainError, ShapeError

DEFAULT_TEMPERATURE = 100.0


@dataclass(frozen=True)
class ScoreVector:
    """Probabilities over all classes plus the trailing background slot."""

    probs: np.ndarray
    temperature: float


@dataclass(frozen=True)
class FusionConfig:
    """Geometric-mean fusion weights: alpha for base classes, beta for novel."""

    alpha: float = 0.35
    beta: float = 0.65

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError(f"beta must be in [0, 1], got {self.beta}")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax in float64, stabilized by max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def probs_from_similarities(similarities: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of temperature-scaled similarities; temperature 0 is the
    uniform limit."""
    if temperature < 0:
        raise ConfigurationError(f"temperature must be >= 0, got {temperature}")
    similarities = np.asarray(similarities, dtype=np.float64)
    if temperature == 0.0:
        n = similarities.shape[-1]
        return np.full_like(similarities, 1.0 / n)
    return softmax_rows(temperature * similarities)


def classify_batch(
    vectors: np.ndarray,
    bank: TextBank,
    temperature: float = DEFAULT_TEMPERATURE,
) -> np.ndarray:
    """(N, C+1) class probabilities for N unit-norm region vectors."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != bank.dim:
        raise ShapeError(
            f"region vectors have dim {vectors.shape[-1] if vectors.ndim else '?'}, "
            f"bank has dim {bank.dim}"
        )
    # Bank and region vectors are unit norm after load, so cosine similarity
    # reduces to a dot product.
    sims = vectors @ bank.vectors.T.astype(np.float64)
    return probs_from_similarities(sims, temperature)


def classify(
    region_vector: np.ndarray,
    bank: TextBank,
    temperature: float = DEFAULT_TEMPERATURE,
) -> ScoreVector:
    """Zero-shot probabilities for one region vector over the full bank."""
    region_vector = np.asarray(region_vector, dtype=np.float64)
    if region_vector.ndim != 1:
        raise ShapeError("region_vector must be 1-d")
    probs = classify_batch(region_vector[None, :], bank, temperature)[0]
    return ScoreVector(probs=probs, temperature=temperature)


def _probs_of(p: "ScoreVector | np.ndarray") -> np.ndarray:
    return p.probs if isinstance(p, ScoreVector) else np.asarray(p, dtype=np.float64)


def fuse_scores(
    p: "ScoreVector | np.ndarray",
    q: "ScoreVector | np.ndarray",
    cfg: FusionConfig,
    novel_mask: np.ndarray,
) -> np.ndarray:
    """Per-class geometric-mean fusion of head probabilities p with frozen
    scorer probabilities q.

    Base classes use exponent alpha on q, novel classes use beta. The
    background slot (last entry) is carried through unchanged from p; the
    output is not renormalized.
    """
    return fuse_scores_batch(_probs_of(p)[None, :], _probs_of(q)[None, :], cfg, novel_mask)[0]


def fuse_scores_batch(
    p: np.ndarray,
    q: np.ndarray,
    cfg: FusionConfig,
    novel_mask: np.ndarray,
) -> np.ndarray:
    """Row-wise fuse_scores over (N, C+1) probability arrays."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"p and q shapes differ: {p.shape} vs {q.shape}")
    novel_mask = np.asarray(novel_mask, dtype=bool)
    if novel_mask.shape[0] != p.shape[1] - 1:
        raise ShapeError("novel_mask must cover every class except background")
    if np.any(p < 0) or np.any(q < 0):
        raise DomainError("negative probability input")
    exp_q = np.where(novel_mask, cfg.beta, cfg.alpha)
    fused = np.empty_like(p)
    fused[:, :-1] = np.power(p[:, :-1], 1.0 - exp_q) * np.power(q[:, :-1], exp_q)
    fused[:, -1] = p[:, -1]
    return fused

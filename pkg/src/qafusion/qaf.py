"""Unsupervised query-adaptive fusion.

For every query each feature's sorted score curve has a matched reference
subtracted, is min-max normalized, and its area is taken as an inverse
effectiveness estimate.  Weights are proportional to 1/area, and the raw
per-feature scores are fused under the sum or product rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .curves import (
    ScoreTable,
    area_under,
    check_same_universe,
    downsample,
    min_max_normalize,
    rank_rows,
    sort_descending,
)
from .errors import ConfigError, DataError
from .reference import MatchConfig, ReferenceCodebook, match_reference, subtract_and_normalize

RULES = ("sum", "product")


@dataclass(frozen=True)
class QafConfig:
    match: MatchConfig = field(default_factory=MatchConfig)
    rule: str = "product"
    epsilon_area: float = 1e-6
    epsilon_score: float = 1e-6
    curve_len: int = 1000

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown fusion rule {self.rule!r}; expected one of {RULES}")
        if self.epsilon_area <= 0 or self.epsilon_score <= 0:
            raise ConfigError("epsilon_area and epsilon_score must be positive")
        if self.curve_len < 2:
            raise ConfigError(f"curve_len must be >= 2, got {self.curve_len}")


def check_weights(w: np.ndarray, k: int | None = None) -> np.ndarray:
    """Validate a weight vector: non-negative, sums to one within 1e-9."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise DataError(f"weights must be a non-empty vector, got shape {w.shape}")
    if k is not None and w.size != k:
        raise DataError(f"expected {k} weights, got {w.size}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise DataError(f"weights must be non-negative and sum to 1, got {w.tolist()}")
    return w


def compute_weights(areas: Sequence[float], epsilon_area: float = 1e-6) -> np.ndarray:
    """Weights inversely proportional to the (floored) curve areas."""
    areas = np.asarray(areas, dtype=np.float64)
    if areas.ndim != 1 or areas.size == 0:
        raise DataError("need at least one area")
    inv = 1.0 / np.maximum(areas, epsilon_area)
    return inv / inv.sum()


def _stack(per_feature_scores) -> np.ndarray:
    try:
        scores = np.asarray(per_feature_scores, dtype=np.float64)
    except ValueError:
        raise DataError("per-feature score lists differ in length") from None
    if scores.ndim != 2:
        raise DataError(f"expected K score lists of equal length, got shape {scores.shape}")
    return scores


def fuse_sum(per_feature_scores, w) -> np.ndarray:
    """Weighted sum of K score lists."""
    scores = _stack(per_feature_scores)
    w = check_weights(w, scores.shape[0])
    return w @ scores


def fuse_product(per_feature_scores, w, epsilon_score: float = 1e-6) -> np.ndarray:
    """Weighted geometric combination ``prod_i s_i ** w_i``.

    Scores are floored at ``epsilon_score`` and combined in log space.
    """
    scores = _stack(per_feature_scores)
    w = check_weights(w, scores.shape[0])
    return np.exp(w @ np.log(np.maximum(scores, epsilon_score)))


def fuse(per_feature_scores, w, rule: str = "product", epsilon_score: float = 1e-6) -> np.ndarray:
    if rule == "sum":
        return fuse_sum(per_feature_scores, w)
    if rule == "product":
        return fuse_product(per_feature_scores, w, epsilon_score)
    raise ConfigError(f"unknown fusion rule {rule!r}")


def fuse_batch(stack: np.ndarray, weights: np.ndarray, rule: str, epsilon_score: float = 1e-6) -> np.ndarray:
    """Fuse a (K, Q, N) score stack with per-query weights of shape (Q, K) or global (K,)."""
    stack = np.asarray(stack, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim == 1:
        weights = np.broadcast_to(weights, (stack.shape[1], stack.shape[0]))
    if rule == "sum":
        return np.einsum("qk,kqn->qn", weights, stack)
    if rule == "product":
        return np.exp(np.einsum("qk,kqn->qn", weights, np.log(np.maximum(stack, epsilon_score))))
    raise ConfigError(f"unknown fusion rule {rule!r}")


def curve_area(
    row: np.ndarray,
    codebook: ReferenceCodebook | None,
    cfg: QafConfig,
) -> float:
    """Effectiveness area of one feature's scores for one query.

    With ``codebook=None`` the curve is only min-max normalized (no reference
    subtraction).
    """
    curve = sort_descending(row).values
    target = cfg.curve_len if codebook is None else min(cfg.curve_len, codebook.curve_len)
    curve = downsample(curve, target)
    if codebook is None:
        return area_under(min_max_normalize(curve).values)
    if curve.size < codebook.curve_len:
        codebook = codebook.resampled(curve.size)
    reference = match_reference(curve, codebook, cfg.match)
    return area_under(subtract_and_normalize(curve, reference).values)


@dataclass(frozen=True)
class QafResult:
    weights: np.ndarray
    areas: np.ndarray
    fused: np.ndarray
    ranking: np.ndarray


def qaf_query(
    per_feature_scores,
    codebooks: Sequence[ReferenceCodebook | None] | None,
    cfg: QafConfig,
) -> QafResult:
    """Weights and fused ranking for one query.

    Args:
        per_feature_scores: K raw (unsorted) score rows over the same gallery.
        codebooks: one codebook per feature, or None to skip reference
            subtraction entirely.
        cfg: fusion settings.

    Returns:
        Weights, areas, fused scores in gallery order, and the gallery
        indices sorted by fused score (ties to the lower index).
    """
    scores = _stack(per_feature_scores)
    k = scores.shape[0]
    if codebooks is None:
        codebooks = [None] * k
    if len(codebooks) != k:
        raise DataError(f"{len(codebooks)} codebooks for {k} features")
    areas = np.array([curve_area(scores[i], codebooks[i], cfg) for i in range(k)])
    w = compute_weights(areas, cfg.epsilon_area)
    fused = fuse(scores, w, cfg.rule, cfg.epsilon_score)
    return QafResult(weights=w, areas=areas, fused=fused, ranking=sort_descending(fused).order)


def qaf_weights(
    tables: Sequence[ScoreTable],
    codebooks: Sequence[ReferenceCodebook | None] | None,
    cfg: QafConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-query weights (Q, K) and areas (Q, K) for aligned score tables."""
    check_same_universe(tables)
    k = len(tables)
    if codebooks is None:
        codebooks = [None] * k
    if len(codebooks) != k:
        raise DataError(f"{len(codebooks)} codebooks for {k} features")
    for t, cb in zip(tables, codebooks):
        if cb is not None and cb.feature_id != t.feature_id:
            raise DataError(f"codebook for {cb.feature_id!r} paired with feature {t.feature_id!r}")
    n = tables[0].gallery_size
    # resample each codebook once instead of per query
    target = min(cfg.curve_len, n)
    codebooks = [None if cb is None else cb.resampled(target) for cb in codebooks]
    nq = tables[0].num_queries
    areas = np.empty((nq, k))
    for i, (t, cb) in enumerate(zip(tables, codebooks)):
        for q in range(nq):
            areas[q, i] = curve_area(t.scores[q], cb, cfg)
    weights = np.vstack([compute_weights(a, cfg.epsilon_area) for a in areas]) if nq else np.empty((0, k))
    return weights, areas


def qaf_fuse(
    tables: Sequence[ScoreTable],
    codebooks: Sequence[ReferenceCodebook | None] | None,
    cfg: QafConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Batch QAF over every query: returns (weights (Q, K), fused scores (Q, N))."""
    weights, _ = qaf_weights(tables, codebooks, cfg)
    stack = np.stack([t.scores for t in tables])
    return weights, fuse_batch(stack, weights, cfg.rule, cfg.epsilon_score)


def fused_rankings(fused: np.ndarray) -> np.ndarray:
    return rank_rows(fused)

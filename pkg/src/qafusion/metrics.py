"""Retrieval metrics and baseline fusion methods.

Metrics: average precision / mAP, the N-S score (relevant items among the
top 4), and rank-1 accuracy.  Baselines: uniform weights, rank aggregation by
median rank, and an exhaustive grid search for global weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .curves import ScoreTable, check_same_universe, rank_rows
from .errors import ConfigError, DataError
from .qaf import fuse_batch

MAX_GRID_POINTS = 10**7


# --------------------------------------------------------------------------
# ground truth
# --------------------------------------------------------------------------


@dataclass
class Qrels:
    """Ground truth relevance.

    Either explicit ``relevant`` sets per query, or identity ``labels`` for
    every item (an item is relevant to a query when the labels agree and the
    ids differ).
    """

    relevant: dict[str, set] = field(default_factory=dict)
    labels: dict[str, str] | None = None

    @classmethod
    def from_labels(cls, labels: Mapping[str, str]) -> "Qrels":
        return cls(relevant={}, labels=dict(labels))

    def relevant_for(self, query_id: str, gallery_ids: Sequence[str]) -> set:
        if self.labels is None:
            return set(self.relevant.get(query_id, ()))
        if query_id not in self.labels:
            raise DataError(f"query {query_id!r} has no identity label")
        lab = self.labels[query_id]
        return {g for g in gallery_ids if g != query_id and self.labels.get(g) == lab}

    def relevance_matrix(self, query_ids: Sequence[str], gallery_ids: Sequence[str]) -> np.ndarray:
        """Boolean (Q, N) matrix; raises if ground truth names unknown ids."""
        gindex = {g: i for i, g in enumerate(gallery_ids)}
        rel = np.zeros((len(query_ids), len(gallery_ids)), dtype=bool)
        if self.labels is not None:
            missing = [g for g in gallery_ids if g not in self.labels]
            if missing:
                raise DataError(f"gallery item {missing[0]!r} has no identity label")
            glab = np.array([self.labels[g] for g in gallery_ids], dtype=object)
            gids = np.array(gallery_ids, dtype=object)
            for qi, q in enumerate(query_ids):
                if q not in self.labels:
                    raise DataError(f"query {q!r} has no identity label")
                rel[qi] = (glab == self.labels[q]) & (gids != q)
            return rel
        known = set(query_ids)
        for q in self.relevant:
            if q not in known:
                raise DataError(f"qrels reference query {q!r} absent from the score tables")
        for qi, q in enumerate(query_ids):
            for g in self.relevant.get(q, ()):
                if g not in gindex:
                    raise DataError(f"qrels reference gallery item {g!r} absent from the score tables")
                rel[qi, gindex[g]] = True
        return rel


def load_qrels(path: str | Path, mode: str = "pairs") -> Qrels:
    """Read a whitespace-separated qrels file.

    ``mode="pairs"``: lines ``query_id gallery_id``.  ``mode="identity"``:
    lines ``item_id identity_label`` covering queries and gallery items.
    """
    if mode not in ("pairs", "identity"):
        raise ConfigError(f"unknown qrels mode {mode!r}")
    relevant: dict[str, set] = {}
    labels: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected two fields, got {len(parts)}")
            a, b = parts
            if mode == "pairs":
                relevant.setdefault(a, set()).add(b)
            else:
                if a in labels and labels[a] != b:
                    raise DataError(f"{path}:{lineno}: conflicting labels for {a!r}")
                labels[a] = b
    return Qrels(relevant=relevant) if mode == "pairs" else Qrels.from_labels(labels)


def write_qrels(qrels: Qrels, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if qrels.labels is not None:
            for item, lab in qrels.labels.items():
                fh.write(f"{item} {lab}\n")
        else:
            for q, gs in qrels.relevant.items():
                for g in sorted(gs):
                    fh.write(f"{q} {g}\n")


# --------------------------------------------------------------------------
# per-query metrics
# --------------------------------------------------------------------------


def average_precision(ranking: Sequence, relevant: Iterable) -> float:
    """Mean of precision@k over the ranks k of the relevant items."""
    relevant = set(relevant)
    if not relevant:
        raise DataError("average precision needs at least one relevant item")
    hits = 0
    total = 0.0
    for k, item in enumerate(ranking, 1):
        if item in relevant:
            hits += 1
            total += hits / k
    return total / len(relevant)


def ns_score(ranking: Sequence, relevant: Iterable) -> int:
    """Number of relevant items among the top 4."""
    if len(ranking) < 4:
        raise DataError(f"N-S score needs a ranking of at least 4 items, got {len(ranking)}")
    relevant = set(relevant)
    return sum(1 for item in ranking[:4] if item in relevant)


def rank1_accuracy(rankings: Mapping[str, Sequence], qrels: Mapping[str, Iterable]) -> float:
    """Fraction of queries whose top-ranked item is relevant.

    ``qrels`` maps query id to its relevant set; queries absent from it count
    as misses.
    """
    if not rankings:
        return 0.0
    hits = sum(1 for q, r in rankings.items() if len(r) and r[0] in set(qrels.get(q, ())))
    return hits / len(rankings)


def ap_from_ranks(order: np.ndarray, rel: np.ndarray) -> np.ndarray:
    """Vectorized AP.  ``order`` (Q, N) gallery indices by rank, ``rel`` (Q, N) bool.

    Rows without a relevant item get NaN.
    """
    hit = np.take_along_axis(rel, order, axis=1)
    cum = np.cumsum(hit, axis=1)
    ranks = np.arange(1, order.shape[1] + 1)
    n_rel = rel.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n_rel > 0, (hit * cum / ranks).sum(axis=1) / n_rel, np.nan)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class MetricReport:
    method: str
    query_ids: list
    ap: list
    map: float
    ns: float | None
    rank1: float
    num_evaluated: int

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "mAP": self.map,
            "NS": self.ns,
            "rank1": self.rank1,
            "num_evaluated": self.num_evaluated,
            "per_query_ap": dict(zip(self.query_ids, self.ap)),
        }


def evaluate_scores(
    fused: np.ndarray,
    rel: np.ndarray,
    query_ids: Sequence[str] | None = None,
    method: str = "",
) -> MetricReport:
    """Metrics for a (Q, N) fused score matrix against a (Q, N) relevance mask."""
    return evaluate_rankings(rank_rows(fused), rel, query_ids, method)


def evaluate_rankings(
    order: np.ndarray,
    rel: np.ndarray,
    query_ids: Sequence[str] | None = None,
    method: str = "",
) -> MetricReport:
    """Metrics for (Q, N) rankings.  Queries with no relevant item are skipped."""
    rel = np.asarray(rel, dtype=bool)
    nq = order.shape[0]
    if query_ids is None:
        query_ids = [str(i) for i in range(nq)]
    keep = rel.any(axis=1)
    ap = ap_from_ranks(order[keep], rel[keep])
    hit = np.take_along_axis(rel[keep], order[keep], axis=1)
    n_eval = int(keep.sum())
    ns = float(hit[:, :4].sum(axis=1).mean()) if order.shape[1] >= 4 and n_eval else None
    return MetricReport(
        method=method,
        query_ids=[q for q, k in zip(query_ids, keep) if k],
        ap=ap.tolist(),
        map=float(ap.mean()) if n_eval else 0.0,
        ns=ns,
        rank1=float(hit[:, 0].mean()) if n_eval else 0.0,
        num_evaluated=n_eval,
    )


def metric_value(report: MetricReport, metric: str) -> float:
    if metric == "map":
        return report.map
    if metric == "rank1":
        return report.rank1
    if metric == "ns":
        if report.ns is None:
            raise DataError("N-S score needs a gallery of at least 4 items")
        return report.ns
    raise ConfigError(f"unknown metric {metric!r}; expected map, rank1 or ns")


# --------------------------------------------------------------------------
# baselines
# --------------------------------------------------------------------------


def rank_aggregation(rankings: Sequence[Sequence]) -> list:
    """Order items by their median rank over K rankings.

    Ties go to the lower mean rank, then to the smaller item id.
    """
    if not rankings:
        raise DataError("rank aggregation needs at least one ranking")
    universe = list(rankings[0])
    if len(set(universe)) != len(universe):
        raise DataError("ranking 0 lists an item twice")
    for i, r in enumerate(rankings[1:], 1):
        if len(r) != len(universe) or set(r) != set(universe):
            raise DataError(f"ranking {i} is not a permutation of ranking 0")
    positions = {item: [] for item in universe}
    for r in rankings:
        for rank, item in enumerate(r, 1):
            positions[item].append(rank)
    key = {item: (float(np.median(p)), sum(p) / len(p), item) for item, p in positions.items()}
    return sorted(universe, key=key.__getitem__)


def rank_aggregation_batch(stack: np.ndarray) -> np.ndarray:
    """Rank aggregation of a (K, Q, N) score stack; returns (Q, N) gallery orders.

    Each feature's ranks come from the descending order of its scores
    (ties to the lower gallery index); the final tie-break is gallery index.
    """
    stack = np.asarray(stack, dtype=np.float64)
    k, nq, n = stack.shape
    ranks = np.empty((k, nq, n))
    for i in range(k):
        order = rank_rows(stack[i])
        np.put_along_axis(ranks[i], order, np.arange(1, n + 1, dtype=np.float64), axis=1)
    med = np.median(ranks, axis=0)
    mean = ranks.mean(axis=0)
    idx = np.broadcast_to(np.arange(n), (nq, n))
    # lexsort: last key is primary
    return np.stack([np.lexsort((idx[q], mean[q], med[q])) for q in range(nq)])


def simplex_grid(k: int, step: float) -> np.ndarray:
    """All weight vectors on the K-simplex with coordinates in multiples of ``step``.

    Rows come in descending lexicographic order, starting at (1, 0, ..., 0).
    """
    if k < 1:
        raise DataError("need at least one feature")
    units = round(1.0 / step)
    if step <= 0 or units < 1 or not math.isclose(units * step, 1.0, rel_tol=0, abs_tol=1e-9):
        raise ConfigError(f"grid step {step} must divide 1 evenly")
    count = math.comb(units + k - 1, k - 1)
    if count > MAX_GRID_POINTS:
        raise ConfigError(
            f"grid has {count} points (K={k}, step={step}); exceeds {MAX_GRID_POINTS}, use a larger step"
        )
    out = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            out.append(prefix + [remaining])
            return
        for a in range(remaining, -1, -1):
            rec(prefix + [a], remaining - a, slots - 1)

    rec([], units, k)
    return np.array(out, dtype=np.float64) / units


def global_grid_search(
    tables: Sequence[ScoreTable],
    qrels: Qrels,
    rule: str = "product",
    step: float = 0.1,
    metric: str = "map",
    epsilon_score: float = 1e-6,
) -> tuple[np.ndarray, float]:
    """Best fixed weight vector over the simplex grid.

    Every query uses the same weights.  Among equally good points the first
    one in descending lexicographic order wins.
    """
    check_same_universe(tables)
    rel = qrels.relevance_matrix(tables[0].query_ids, tables[0].gallery_ids)
    return grid_search_stack(np.stack([t.scores for t in tables]), rel, rule, step, metric, epsilon_score)


def grid_search_stack(
    stack: np.ndarray,
    rel: np.ndarray,
    rule: str = "product",
    step: float = 0.1,
    metric: str = "map",
    epsilon_score: float = 1e-6,
) -> tuple[np.ndarray, float]:
    """:func:`global_grid_search` on a (K, Q, N) score stack and (Q, N) relevance mask."""
    grid = simplex_grid(stack.shape[0], step)
    best_w, best = None, -math.inf
    for w in grid:
        report = evaluate_scores(fuse_batch(stack, w, rule, epsilon_score), rel)
        value = metric_value(report, metric)
        if value > best:
            best_w, best = w, value
    return best_w, best

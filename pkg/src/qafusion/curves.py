"""Score tables and sorted score curves.

A score table holds the raw similarity of every gallery item to every query
for one feature.  Everything downstream works on a query's row after sorting
it in descending order (its "score curve").
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ScoreTable:
    """Dense query x gallery similarity matrix for a single feature."""

    feature_id: str
    query_ids: tuple[str, ...]
    gallery_ids: tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "query_ids", tuple(self.query_ids))
        object.__setattr__(self, "gallery_ids", tuple(self.gallery_ids))
        if scores.shape != (len(self.query_ids), len(self.gallery_ids)):
            raise DataError(
                f"feature {self.feature_id!r}: scores shape {scores.shape} does not match "
                f"{len(self.query_ids)} queries x {len(self.gallery_ids)} gallery items"
            )
        if not np.all(np.isfinite(scores)):
            q, g = np.argwhere(~np.isfinite(scores))[0]
            raise DataError(
                f"feature {self.feature_id!r}: non-finite score for query "
                f"{self.query_ids[q]!r}, gallery {self.gallery_ids[g]!r}"
            )
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    @property
    def num_queries(self) -> int:
        return len(self.query_ids)

    @property
    def gallery_size(self) -> int:
        return len(self.gallery_ids)

    def row(self, query_id: str) -> np.ndarray:
        return self.scores[self.query_ids.index(query_id)]


@dataclass(frozen=True)
class SortedCurve:
    """One query's scores in non-increasing order.

    ``order[j]`` is the gallery index of the item at sorted position ``j``.
    """

    values: np.ndarray
    order: np.ndarray
    gallery_ids: tuple | None = None

    def ranked_ids(self) -> list:
        if self.gallery_ids is None:
            return self.order.tolist()
        return [self.gallery_ids[i] for i in self.order]

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class NormalizedCurve:
    values: np.ndarray
    degenerate: bool = False


def _check_finite(values: np.ndarray) -> None:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DataError(f"non-finite score at index {int(bad[0])}: {values[bad[0]]!r}")


def sort_descending(row: Sequence[float], gallery_ids: Sequence | None = None) -> SortedCurve:
    """Sort a score row high-to-low.

    Ties keep their original gallery order, so the result is deterministic.

    Raises:
        DataError: if the row is empty or contains NaN/inf.
    """
    values = np.asarray(row, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise DataError("empty score list")
    _check_finite(values)
    if gallery_ids is not None and len(gallery_ids) != values.size:
        raise DataError(f"{len(gallery_ids)} gallery ids for {values.size} scores")
    # stable sort on the negated scores keeps ascending index among ties
    order = np.argsort(-values, kind="stable")
    ids = tuple(gallery_ids) if gallery_ids is not None else None
    return SortedCurve(values=values[order], order=order, gallery_ids=ids)


def rank_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise descending argsort with the same tie rule as :func:`sort_descending`."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), axis=-1, kind="stable")


def min_max_normalize(curve: Sequence[float]) -> NormalizedCurve:
    """Rescale a curve to [0, 1].

    A constant curve cannot be rescaled; it comes back as all zeros with
    ``degenerate=True`` instead of raising.
    """
    values = np.asarray(curve, dtype=np.float64)
    if values.size == 0:
        raise DataError("empty score list")
    _check_finite(values)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return NormalizedCurve(np.zeros_like(values), degenerate=True)
    out = (values - lo) / (hi - lo)
    # pin the extremes exactly; the division can be off by an ulp
    out[values == hi] = 1.0
    out[values == lo] = 0.0
    return NormalizedCurve(out, degenerate=False)


def area_under(curve: Sequence[float]) -> float:
    """Discrete area of a rank-indexed curve (unit spacing between ranks)."""
    values = np.asarray(curve, dtype=np.float64)
    if values.size == 0:
        raise DataError("empty score list")
    return float(values.sum())


def downsample_indices(length: int, target_len: int) -> np.ndarray:
    """Evenly spaced positions ``round(j * (length - 1) / (target_len - 1))``.

    Rounds half up.  Returns ``arange(length)`` when the curve is already
    no longer than ``target_len``.
    """
    if target_len < 2:
        raise DataError(f"target_len must be >= 2, got {target_len}")
    if length <= target_len:
        return np.arange(length)
    j = np.arange(target_len, dtype=np.float64)
    idx = np.floor(j * (length - 1) / (target_len - 1) + 0.5).astype(np.int64)
    idx[0], idx[-1] = 0, length - 1
    return idx


def downsample(curve: Sequence[float], target_len: int) -> np.ndarray:
    """Pick ``target_len`` points of a curve at evenly spaced fractional ranks.

    The first and last ranks are always kept.  Works on the last axis, so a
    stack of curves can be down-sampled in one call.
    """
    values = np.asarray(curve, dtype=np.float64)
    return values[..., downsample_indices(values.shape[-1], target_len)]


# --------------------------------------------------------------------------
# JSON-lines score files
# --------------------------------------------------------------------------


def load_score_tables(paths: str | Path | Iterable[str | Path]) -> dict[str, ScoreTable]:
    """Read one or more JSON-lines score files.

    Every line is ``{"feature", "query", "gallery", "score"}``.  Lines may mix
    features and files; the result maps feature id to a dense table whose
    query/gallery order follows first appearance.  Blank lines and lines
    starting with ``#`` are skipped.

    Raises:
        DataError: on malformed lines, duplicate triples, or a feature whose
            (query, gallery) coverage is not a full grid.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    raw: dict[str, dict] = OrderedDict()
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    rec = json.loads(line)
                    feat, q, g = str(rec["feature"]), str(rec["query"]), str(rec["gallery"])
                    score = float(rec["score"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: malformed score record ({exc})") from None
                entry = raw.setdefault(feat, {"q": {}, "g": {}, "cells": {}})
                qi = entry["q"].setdefault(q, len(entry["q"]))
                gi = entry["g"].setdefault(g, len(entry["g"]))
                if (qi, gi) in entry["cells"]:
                    raise DataError(
                        f"{path}:{lineno}: duplicate score for feature {feat!r}, "
                        f"query {q!r}, gallery {g!r}"
                    )
                entry["cells"][(qi, gi)] = score

    tables = OrderedDict()
    for feat, entry in raw.items():
        nq, ng = len(entry["q"]), len(entry["g"])
        if len(entry["cells"]) != nq * ng:
            raise DataError(
                f"feature {feat!r}: ragged coverage, {len(entry['cells'])} scores for "
                f"{nq} queries x {ng} gallery items"
            )
        scores = np.empty((nq, ng))
        for (qi, gi), s in entry["cells"].items():
            scores[qi, gi] = s
        tables[feat] = ScoreTable(feat, tuple(entry["q"]), tuple(entry["g"]), scores)
    return tables


def write_score_table(table: ScoreTable, path: str | Path) -> None:
    """Write a table as JSON lines, row-major, with round-trip float precision."""
    feat = json.dumps(table.feature_id)
    qids = [json.dumps(q) for q in table.query_ids]
    gids = [json.dumps(g) for g in table.gallery_ids]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qi, q in enumerate(qids):
            row = table.scores[qi]
            fh.writelines(
                f'{{"feature": {feat}, "query": {q}, "gallery": {g}, "score": {format_float(s)}}}\n'
                for g, s in zip(gids, row.tolist())
            )


def format_float(x: float) -> str:
    """17 significant digits; JSON-safe for finite values."""
    if not math.isfinite(x):
        raise DataError(f"cannot serialize non-finite value {x!r}")
    return format(x, ".17g")


def check_same_universe(tables: Sequence[ScoreTable]) -> None:
    """Raise if the tables do not share query and gallery id lists."""
    if not tables:
        raise DataError("no score tables given")
    first = tables[0]
    for t in tables[1:]:
        if t.query_ids != first.query_ids or t.gallery_ids != first.gallery_ids:
            raise DataError(
                f"features {first.feature_id!r} and {t.feature_id!r} cover different "
                "query/gallery universes"
            )

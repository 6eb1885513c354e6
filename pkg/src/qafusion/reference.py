"""Reference codebooks for offsetting the tail of a score curve.

A codebook is a stack of sorted score curves collected on a corpus where no
gallery item is relevant to any query.  At query time the curve closest to
the query's curve (on a chosen rank segment) approximates the query's
"background" scores; subtracting it leaves only the protrusion of the true
matches, if there are any.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import jsonio
from .curves import NormalizedCurve, ScoreTable, downsample, min_max_normalize
from .errors import ConfigError, DataError

METHODS = ("nearest", "knn_average")


@dataclass(frozen=True)
class ReferenceCodebook:
    feature_id: str
    curves: np.ndarray
    seed: int | None = None
    provenance: str = ""

    def __post_init__(self):
        curves = np.array(self.curves, dtype=np.float64)
        if curves.ndim != 2:
            raise DataError(f"codebook curves must be a 2-D array, got shape {curves.shape}")
        if curves.shape[0] and np.any(np.diff(curves, axis=1) > 0):
            raise DataError(f"codebook {self.feature_id!r}: reference curves must be non-increasing")
        curves.setflags(write=False)
        object.__setattr__(self, "curves", curves)

    @property
    def size(self) -> int:
        return self.curves.shape[0]

    @property
    def curve_len(self) -> int:
        return self.curves.shape[1]

    def resampled(self, target_len: int) -> "ReferenceCodebook":
        """Same codebook with every curve down-sampled to ``target_len``."""
        if target_len >= self.curve_len:
            return self
        return ReferenceCodebook(self.feature_id, downsample(self.curves, target_len),
                                 self.seed, self.provenance)


@dataclass(frozen=True)
class MatchConfig:
    """Segment and neighbour settings for reference matching.

    ``u`` and ``v`` are 1-based inclusive ranks.  ``method="nearest"`` takes
    the single closest reference (``k`` is forced to 1); ``"knn_average"``
    averages the ``k`` closest ones.
    """

    u: int = 1
    v: int = 400
    k: int = 5
    method: str = "knn_average"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown match method {self.method!r}; expected one of {METHODS}")
        if not 1 <= self.u < self.v:
            raise ConfigError(f"need 1 <= u < v, got u={self.u}, v={self.v}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.method == "nearest":
            object.__setattr__(self, "k", 1)

    def segment(self, curve_len: int) -> slice:
        """Python slice for ranks u..v, clamping v to the curve length."""
        v = self.v
        if v > curve_len:
            warnings.warn(f"match segment end v={v} exceeds curve length {curve_len}; clamping", stacklevel=3)
            v = curve_len
        if self.u >= v:
            raise ConfigError(f"segment start u={self.u} leaves nothing to match on a curve of length {curve_len}")
        return slice(self.u - 1, v)


def build_codebook(
    irrelevant_scores: ScoreTable,
    num_queries: int,
    curve_len: int,
    rng_seed: int,
    provenance: str = "",
) -> ReferenceCodebook:
    """Draw ``num_queries`` rows at random and keep their sorted, resampled curves.

    The caller vouches that no gallery item in ``irrelevant_scores`` is
    relevant to any of its queries.
    """
    if num_queries < 1 or num_queries > irrelevant_scores.num_queries:
        raise DataError(
            f"cannot draw Q={num_queries} reference queries from "
            f"{irrelevant_scores.num_queries} available rows"
        )
    if curve_len < 2 or curve_len > irrelevant_scores.gallery_size:
        raise DataError(
            f"curve_len={curve_len} must be in [2, gallery size {irrelevant_scores.gallery_size}]"
        )
    rng = np.random.default_rng(rng_seed)
    rows = rng.choice(irrelevant_scores.num_queries, size=num_queries, replace=False)
    curves = -np.sort(-irrelevant_scores.scores[rows], axis=1)
    return ReferenceCodebook(
        feature_id=irrelevant_scores.feature_id,
        curves=downsample(curves, curve_len),
        seed=rng_seed,
        provenance=provenance,
    )


def segment_distances(curve: np.ndarray, codebook: ReferenceCodebook, cfg: MatchConfig) -> np.ndarray:
    """Euclidean distance from ``curve`` to every reference on ranks u..v."""
    curve = np.asarray(curve, dtype=np.float64)
    if codebook.size == 0:
        raise DataError(f"codebook {codebook.feature_id!r} is empty")
    if curve.shape != (codebook.curve_len,):
        raise DataError(
            f"curve length {curve.shape[-1]} does not match codebook curve_len {codebook.curve_len}"
        )
    seg = cfg.segment(codebook.curve_len)
    diff = codebook.curves[:, seg] - curve[seg]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def nearest_indices(curve: np.ndarray, codebook: ReferenceCodebook, cfg: MatchConfig) -> np.ndarray:
    """Indices of the matched references, closest first (ties to the lower index)."""
    dist = segment_distances(curve, codebook, cfg)
    k = 1 if cfg.method == "nearest" else min(cfg.k, codebook.size)
    return np.argsort(dist, kind="stable")[:k]


def match_reference(curve: np.ndarray, codebook: ReferenceCodebook, cfg: MatchConfig) -> np.ndarray:
    """Reference curve for a sorted query curve.

    Matching only looks at ranks u..v, but the returned reference covers the
    full curve length.
    """
    idx = nearest_indices(curve, codebook, cfg)
    if idx.size == 1:
        return codebook.curves[idx[0]].copy()
    return codebook.curves[idx].mean(axis=0)


def subtract_and_normalize(curve: np.ndarray, reference: np.ndarray) -> NormalizedCurve:
    """Remove the reference from a curve and min-max normalize the remainder."""
    curve = np.asarray(curve, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if curve.shape != reference.shape:
        raise DataError(f"curve length {curve.shape} does not match reference length {reference.shape}")
    return min_max_normalize(curve - reference)


# --------------------------------------------------------------------------
# codebook files
# --------------------------------------------------------------------------

CODEBOOK_FORMAT = "qafusion.codebook/1"


def save_codebook(codebook: ReferenceCodebook, path: str | Path, config: dict | None = None) -> None:
    """Write a codebook as JSON.  17 significant digits round-trip float64 exactly."""
    doc = {
        "format": CODEBOOK_FORMAT,
        "feature_id": codebook.feature_id,
        "Q": codebook.size,
        "curve_len": codebook.curve_len,
        "seed": codebook.seed,
        "provenance": codebook.provenance,
        "config": config or {},
        "curves": codebook.curves.tolist(),
    }
    jsonio.dump(doc, path)


def load_codebook(path: str | Path) -> ReferenceCodebook:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a codebook file ({exc})") from None
    if doc.get("format") != CODEBOOK_FORMAT:
        raise DataError(f"{path}: unsupported codebook format {doc.get('format')!r}")
    cb = ReferenceCodebook(
        feature_id=doc["feature_id"],
        curves=np.array(doc["curves"], dtype=np.float64).reshape(doc["Q"], doc["curve_len"]),
        seed=doc.get("seed"),
        provenance=doc.get("provenance", ""),
    )
    return cb

"""Seeded generator of synthetic multi-feature retrieval problems.

Each feature draws the score of a true match from one distribution and the
score of a false match from another.  A feature whose two distributions are
far apart produces L-shaped sorted curves; one with identical distributions
is chance level.  Features can also be informative for only a fraction of
queries, which is how query-dependent quality is simulated.

Spec files are JSON; every field has a default (see ``SynthSpec``)::

    {
      "num_queries": 100, "gallery_size": 1000, "relevant_per_query": 4,
      "seed": 0, "irrelevant": false, "min_informative": 0,
      "features": [
        {"name": "good", "pos": {"kind": "beta", "a": 8, "b": 2},
         "neg": {"kind": "beta", "a": 2, "b": 8},
         "informative_prob": 1.0, "tail_jitter": 0.0}
      ]
    }
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .curves import ScoreTable
from .errors import ConfigError
from .metrics import Qrels

KINDS = ("beta", "uniform", "point", "normal", "power")


@dataclass(frozen=True)
class Dist:
    """A score distribution.

    ``beta``: Beta(a, b).  ``uniform``: U[a, b].  ``point``: constant a.
    ``normal``: N(a, b**2).  ``power``: b * U**(1/a), i.e. a Beta(a, 1)
    scaled to [0, b]; its density stays positive at the top of the range.
    """

    kind: str = "beta"
    a: float = 2.0
    b: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown distribution kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("beta", "power") and (self.a <= 0 or self.b <= 0):
            raise ConfigError(f"{self.kind} parameters must be positive")
        if self.kind == "uniform" and self.b < self.a:
            raise ConfigError("uniform needs a <= b")
        if self.kind == "normal" and self.b < 0:
            raise ConfigError("normal needs a non-negative spread")

    def sample(self, rng: np.random.Generator, size, scale_a=1.0, scale_b=1.0) -> np.ndarray:
        """Draw scores.  ``scale_a``/``scale_b`` multiply the beta/power parameters."""
        if self.kind == "beta":
            return rng.beta(self.a * scale_a, self.b * scale_b, size=size)
        if self.kind == "power":
            return self.b * scale_b * rng.random(size) ** (1.0 / (self.a * scale_a))
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, size=size)
        if self.kind == "normal":
            return rng.normal(self.a, self.b, size=size)
        return np.full(size, float(self.a))


@dataclass(frozen=True)
class FeatureProfile:
    """Score model for one feature.

    Attributes:
        name: feature id.
        pos: true-match score distribution.
        neg: false-match score distribution.
        informative_prob: chance that the feature is informative for a given
            query.  For the other queries true matches are scored like false
            ones.
        tail_jitter: per-query log-scale jitter of the beta/power parameters,
            drawn from U(-tail_jitter, tail_jitter).  Gives every query its
            own background score distribution.
    """

    name: str
    pos: Dist = field(default_factory=lambda: Dist("beta", 8, 2))
    neg: Dist = field(default_factory=lambda: Dist("beta", 2, 8))
    informative_prob: float = 1.0
    tail_jitter: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.informative_prob <= 1.0:
            raise ConfigError(f"informative_prob must be in [0, 1], got {self.informative_prob}")
        if self.tail_jitter < 0:
            raise ConfigError("tail_jitter must be non-negative")


PRESETS = {
    "good": (Dist("beta", 8, 2), Dist("beta", 2, 8)),
    "medium": (Dist("beta", 4, 3), Dist("beta", 2, 5)),
    "bad": (Dist("beta", 2, 2), Dist("beta", 2, 2)),
}


def preset(name: str, kind: str | None = None, **kw) -> FeatureProfile:
    """Feature profile from a named preset (good / medium / bad)."""
    pos, neg = PRESETS[kind or name]
    return FeatureProfile(name=name, pos=pos, neg=neg, **kw)


@dataclass(frozen=True)
class SynthSpec:
    num_queries: int = 100
    gallery_size: int = 1000
    relevant_per_query: int = 4
    features: tuple[FeatureProfile, ...] = (
        preset("good"),
        preset("medium"),
        preset("bad"),
    )
    seed: int = 0
    irrelevant: bool = False
    min_informative: int = 0

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if self.num_queries < 1:
            raise ConfigError("num_queries must be >= 1")
        if not self.irrelevant and not 1 <= self.relevant_per_query < self.gallery_size:
            raise ConfigError("need gallery_size > relevant_per_query >= 1")
        if not self.features:
            raise ConfigError("need at least one feature")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate feature names in {names}")
        if not 0 <= self.min_informative <= len(self.features):
            raise ConfigError("min_informative must be between 0 and the number of features")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        doc = dict(doc)
        feats = []
        for f in doc.pop("features", [asdict(p) for p in cls.features]):
            f = dict(f)
            bad = set(f) - set(FeatureProfile.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown feature keys: {sorted(bad)}")
            for key in ("pos", "neg"):
                if key in f:
                    f[key] = Dist(**f[key])
            feats.append(FeatureProfile(**f))
        return cls(features=tuple(feats), **doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = [asdict(f) for f in self.features]
        return d


@dataclass(frozen=True)
class SynthData:
    tables: list[ScoreTable]
    qrels: Qrels
    informative: np.ndarray  # (Q, K) bool: feature separated true matches for that query
    relevance: np.ndarray  # (Q, N) bool

    @property
    def stack(self) -> np.ndarray:
        return np.stack([t.scores for t in self.tables])


def _ids(prefix: str, n: int) -> tuple[str, ...]:
    width = len(str(max(n - 1, 0)))
    return tuple(f"{prefix}{i:0{width}d}" for i in range(n))


def generate(spec: SynthSpec) -> SynthData:
    """Build K score tables plus ground truth, fully determined by ``spec``."""
    nq, n, k = spec.num_queries, spec.gallery_size, len(spec.features)
    qids, gids = _ids("q", nq), _ids("g", n)

    rel = np.zeros((nq, n), dtype=bool)
    if not spec.irrelevant:
        rng = np.random.default_rng([spec.seed, 0])
        for q in range(nq):
            rel[q, rng.choice(n, size=spec.relevant_per_query, replace=False)] = True

    rng = np.random.default_rng([spec.seed, 1])
    informative = rng.random((nq, k)) < np.array([f.informative_prob for f in spec.features])
    if spec.min_informative:
        # promote random features until each query has enough informative ones
        for q in range(nq):
            short = spec.min_informative - informative[q].sum()
            if short > 0:
                cand = np.flatnonzero(~informative[q])
                informative[q, rng.choice(cand, size=short, replace=False)] = True
    if spec.irrelevant:
        informative[:] = False

    tables = []
    for i, prof in enumerate(spec.features):
        frng = np.random.default_rng([spec.seed, 2, i])
        if prof.tail_jitter > 0:
            jit = np.exp(frng.uniform(-prof.tail_jitter, prof.tail_jitter, size=(nq, 2)))
        else:
            jit = np.ones((nq, 2))
        scores = np.empty((nq, n))
        for q in range(nq):
            scores[q] = prof.neg.sample(frng, n, jit[q, 0], jit[q, 1])
            pos = rel[q]
            npos = int(pos.sum())
            if npos and informative[q, i]:
                scores[q, pos] = prof.pos.sample(frng, npos)
            elif npos:
                scores[q, pos] = prof.neg.sample(frng, npos, jit[q, 0], jit[q, 1])
        tables.append(ScoreTable(prof.name, qids, gids, scores))

    qrels = Qrels(relevant={qids[q]: {gids[g] for g in np.flatnonzero(rel[q])} for q in range(nq) if rel[q].any()})
    return SynthData(tables=tables, qrels=qrels, informative=informative, relevance=rel)


def add_random_features(
    tables: Sequence[ScoreTable],
    count: int,
    seed: int,
    dist: Dist = Dist("beta", 2, 2),
    prefix: str = "rand",
) -> list[ScoreTable]:
    """Append ``count`` chance-level features (scores independent of relevance)."""
    tables = list(tables)
    if count <= 0:
        return tables
    base = tables[0]
    shape = (base.num_queries, base.gallery_size)
    width = len(str(count - 1))
    for j in range(count):
        rng = np.random.default_rng([seed, 3, j])
        tables.append(ScoreTable(f"{prefix}{j:0{width}d}", base.query_ids, base.gallery_ids,
                                 dist.sample(rng, shape)))
    return tables

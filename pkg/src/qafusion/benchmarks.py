"""Ready-made synthetic benchmarks.

The generic presets in :mod:`qafusion.synth` use Beta backgrounds, whose
density vanishes at the top of the score range.  Real false-match score
distributions have a heavy-ish upper tail that varies from query to query;
the profiles here model that with a jittered power-law background
(``Dist("power", 1, 0.45)`` is U[0, 0.45]; jitter reshapes it per query).
Chance-level "global descriptor" features score every item in a narrow high
band, giving flat sorted curves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curves import ScoreTable
from .reference import ReferenceCodebook, build_codebook
from .synth import Dist, FeatureProfile, SynthSpec, add_random_features, generate

TAIL = Dist("power", 1.0, 0.45)
GLOBAL_RANDOM = Dist("uniform", 0.7, 0.9)


def tail_good(name: str = "good", jitter: float = 0.8) -> FeatureProfile:
    return FeatureProfile(name, pos=Dist("beta", 8, 2), neg=TAIL, tail_jitter=jitter)


def tail_medium(name: str = "medium", jitter: float = 0.8) -> FeatureProfile:
    return FeatureProfile(name, pos=Dist("beta", 4, 4), neg=TAIL, tail_jitter=jitter)


def global_random(name: str = "random") -> FeatureProfile:
    return FeatureProfile(name, pos=GLOBAL_RANDOM, neg=GLOBAL_RANDOM)


def codebooks_for(profiles, gallery_size: int, seed: int, num_curves: int = 1000,
                  relevant_per_query: int = 4) -> list[ReferenceCodebook]:
    """One codebook per profile, built from a generated irrelevant corpus."""
    corpus = generate(SynthSpec(num_curves, gallery_size, relevant_per_query, tuple(profiles),
                                seed=seed, irrelevant=True))
    return [build_codebook(t, num_curves, gallery_size, 0, provenance=f"synthetic irrelevant corpus seed={seed}")
            for t in corpus.tables]


# --------------------------------------------------------------------------
# good-vs-bad curve separation
# --------------------------------------------------------------------------


@dataclass
class SeparationSet:
    good: np.ndarray  # (G, N) score rows of queries whose top item is relevant
    bad: np.ndarray  # (B, N) score rows of queries with no relevant item
    codebook: ReferenceCodebook


def separation_set(num_good: int = 500, num_bad: int = 500, gallery_size: int = 1000,
                   relevant_per_query: int = 4, seed: int = 1) -> SeparationSet:
    """Good and bad queries of one feature plus its codebook.

    A query is "good" when the feature ranks a true match first; candidates
    are generated until ``num_good`` are found.
    """
    prof = tail_good("f")
    rows, draw = [], 0
    while sum(len(r) for r in rows) < num_good:
        data = generate(SynthSpec(3 * num_good, gallery_size, relevant_per_query, (prof,),
                                  seed=seed + 1000 * draw))
        s = data.tables[0].scores
        ok = data.relevance[np.arange(s.shape[0]), s.argmax(axis=1)]
        rows.append(s[ok])
        draw += 1
    good = np.vstack(rows)[:num_good]
    bad = generate(SynthSpec(num_bad, gallery_size, relevant_per_query, (prof,), seed=seed + 1,
                             irrelevant=True)).tables[0].scores
    cb = codebooks_for([prof], gallery_size, seed + 2, relevant_per_query=relevant_per_query)[0]
    return SeparationSet(good, np.asarray(bad), cb)


def threshold_accuracy(good_areas, bad_areas) -> float:
    """Best accuracy of the rule "good iff area <= t" over all thresholds t."""
    good_areas, bad_areas = np.asarray(good_areas), np.asarray(bad_areas)
    vals = np.concatenate([good_areas, bad_areas])
    lab = np.r_[np.ones(good_areas.size), np.zeros(bad_areas.size)]
    order = np.argsort(vals, kind="stable")
    vals, lab = vals[order], lab[order]
    # only cut between distinct values
    last = np.r_[vals[1:] != vals[:-1], True]
    good_below = np.cumsum(lab)[last]
    bad_below = np.cumsum(1 - lab)[last]
    acc = (good_below + bad_areas.size - bad_below) / vals.size
    return float(max(acc.max(), bad_areas.size / vals.size))


# --------------------------------------------------------------------------
# multi-feature fusion
# --------------------------------------------------------------------------


@dataclass
class FusionBench:
    tables: list[ScoreTable]
    relevance: np.ndarray
    codebooks: list[ReferenceCodebook]

    @property
    def stack(self) -> np.ndarray:
        return np.stack([t.scores for t in self.tables])


def fusion_bench(profiles, extra_random: int = 0, num_queries: int = 300, gallery_size: int = 1000,
                 seed: int = 11) -> FusionBench:
    """Features from ``profiles`` plus ``extra_random`` global-random features, with codebooks."""
    data = generate(SynthSpec(num_queries, gallery_size, 4, tuple(profiles), seed=seed))
    tables = add_random_features(data.tables, extra_random, seed=5, dist=GLOBAL_RANDOM)
    corpus_profiles = list(profiles) + [global_random(t.feature_id) for t in tables[len(profiles):]]
    cbs = codebooks_for(corpus_profiles, gallery_size, seed + 1)
    return FusionBench(tables, data.relevance, cbs)


def three_feature_bench(**kw) -> FusionBench:
    """Good, medium and chance-level feature."""
    return fusion_bench((tail_good(), tail_medium(), global_random()), **kw)


def many_bad_features_bench(extra_random: int = 20, **kw) -> FusionBench:
    """One good feature followed by ``extra_random`` chance-level ones."""
    return fusion_bench((tail_good(),), extra_random=extra_random, **kw)


# --------------------------------------------------------------------------
# query-dependent feature quality
# --------------------------------------------------------------------------


def part_features(k: int = 4, informative_prob: float = 0.5) -> tuple[FeatureProfile, ...]:
    """K part-like features, each informative for a random subset of queries.

    Informative: true matches ~ Beta(9, 1); otherwise they look like the
    Beta(2, 5) background.
    """
    return tuple(FeatureProfile(f"part{i}", pos=Dist("beta", 9, 1), neg=Dist("beta", 2, 5),
                                informative_prob=informative_prob) for i in range(k))


def query_varying_spec(num_queries: int, seed: int, gallery_size: int = 200, k: int = 4) -> SynthSpec:
    """Every query has at least one informative feature."""
    return SynthSpec(num_queries, gallery_size, 3, part_features(k), seed=seed, min_informative=1)

import numpy as np
import pytest

from qafusion.curves import area_under, min_max_normalize, write_score_table
from qafusion.errors import ConfigError
from qafusion.metrics import ap_from_ranks, evaluate_scores
from qafusion.synth import Dist, FeatureProfile, SynthSpec, add_random_features, generate, preset


def chance_ap_oracle(n, r, trials, seed):
    """Monte-Carlo mean and standard deviation of AP under random rankings."""
    rng = np.random.default_rng(seed)
    rel = np.zeros((trials, n), bool)
    rel[:, :r] = True
    order = np.argsort(rng.random((trials, n)), axis=1)
    ap = ap_from_ranks(order, rel)
    return ap.mean(), ap.std()


class TestSpec:
    def test_defaults(self):
        s = SynthSpec()
        assert (s.num_queries, s.gallery_size, s.relevant_per_query) == (100, 1000, 4)
        assert [f.name for f in s.features] == ["good", "medium", "bad"]
        assert s.features[0].pos == Dist("beta", 8, 2) and s.features[0].neg == Dist("beta", 2, 8)
        assert s.features[2].pos == s.features[2].neg == Dist("beta", 2, 2)

    @pytest.mark.parametrize("kw", [
        {"gallery_size": 4, "relevant_per_query": 4},
        {"relevant_per_query": 0},
        {"features": ()},
        {"features": (preset("a", "good"), preset("a", "bad"))},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            SynthSpec(**kw)

    def test_bad_dist(self):
        with pytest.raises(ConfigError):
            Dist("gamma", 1, 1)
        with pytest.raises(ConfigError):
            Dist("beta", 0, 1)

    def test_dict_round_trip(self):
        s = SynthSpec(num_queries=7, features=(FeatureProfile("x", Dist("power", 1, 0.4), tail_jitter=0.3),))
        assert SynthSpec.from_dict(s.to_dict()) == s

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="num_querys"):
            SynthSpec.from_dict({"num_querys": 3})
        with pytest.raises(ConfigError, match="colour"):
            SynthSpec.from_dict({"features": [{"name": "a", "colour": 1}]})


class TestGenerate:
    def test_perfect_separation(self):
        f = FeatureProfile("p", pos=Dist("point", 1), neg=Dist("point", 0))
        d = generate(SynthSpec(20, 50, 3, (f,), seed=1))
        rel = d.relevance
        assert evaluate_scores(d.tables[0].scores, rel).map == 1.0

    def test_deterministic_bytes(self, tmp_path):
        spec = SynthSpec(10, 40, 2, seed=3)
        for name in ("a", "b"):
            for t in generate(spec).tables:
                write_score_table(t, tmp_path / f"{name}_{t.feature_id}.jsonl")
        for f in ("good", "medium", "bad"):
            assert (tmp_path / f"a_{f}.jsonl").read_bytes() == (tmp_path / f"b_{f}.jsonl").read_bytes()

    def test_good_feature_map(self):
        d = generate(SynthSpec(100, 1000, 4, (preset("good"),), seed=2))
        assert evaluate_scores(d.tables[0].scores, d.relevance).map >= 0.8

    def test_uniform_is_chance(self):
        f = FeatureProfile("u", pos=Dist("uniform", 0, 1), neg=Dist("uniform", 0, 1))
        n, r, nq = 1000, 4, 500
        d = generate(SynthSpec(nq, n, r, (f,), seed=4))
        got = evaluate_scores(d.tables[0].scores, d.relevance).map
        mean, sd = chance_ap_oracle(n, r, 10_000, seed=5)
        assert abs(got - mean) <= 3 * sd / np.sqrt(nq)

    def test_irrelevant_mode(self):
        d = generate(SynthSpec(5, 30, 2, seed=6, irrelevant=True))
        assert not d.relevance.any() and not d.informative.any()
        assert d.qrels.relevant == {}

    def test_min_informative(self):
        feats = tuple(FeatureProfile(f"p{i}", informative_prob=0.1) for i in range(4))
        d = generate(SynthSpec(200, 30, 2, feats, seed=7, min_informative=1))
        assert d.informative.sum(1).min() >= 1

    def test_good_curves_smaller_than_bad(self):
        # normalized area of good-feature curves below bad-feature curves
        d = generate(SynthSpec(200, 1000, 4, (preset("good"), preset("bad")), seed=8))
        area = [[area_under(min_max_normalize(np.sort(row)[::-1]).values) for row in t.scores] for t in d.tables]
        good, bad = np.array(area[0]), np.array(area[1])
        assert np.mean(good[:, None] < bad[None, :]) >= 0.95


class TestRandomFeatures:
    def test_counts(self):
        base = generate(SynthSpec(10, 40, 2, seed=9)).tables
        assert add_random_features(base, 0, 1) == base
        ext = add_random_features(base, 20, 1)
        assert len(ext) == 23 and ext[3].feature_id == "rand00" and ext[-1].feature_id == "rand19"
        again = add_random_features(base, 20, 1)
        assert all(np.array_equal(a.scores, b.scores) for a, b in zip(ext, again))

    def test_chance_level(self):
        d = generate(SynthSpec(500, 1000, 4, (preset("good"),), seed=10))
        ext = add_random_features(d.tables, 3, 11)
        mean, sd = chance_ap_oracle(1000, 4, 10_000, seed=12)
        for t in ext[1:]:
            assert abs(evaluate_scores(t.scores, d.relevance).map - mean) <= 3 * sd / np.sqrt(500)

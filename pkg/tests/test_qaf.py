import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qafusion.benchmarks import codebooks_for, global_random, tail_good, tail_medium
from qafusion.curves import ScoreTable, rank_rows
from qafusion.errors import ConfigError, DataError
from qafusion.qaf import (
    QafConfig,
    check_weights,
    compute_weights,
    curve_area,
    fuse,
    fuse_batch,
    fuse_product,
    fuse_sum,
    qaf_fuse,
    qaf_query,
    qaf_weights,
)
from qafusion.reference import MatchConfig
from qafusion.synth import SynthSpec, generate

areas_st = st.lists(st.floats(min_value=1e-3, max_value=1e3), min_size=1, max_size=8)


class TestComputeWeights:
    def test_examples(self):
        assert compute_weights([2, 2]).tolist() == [0.5, 0.5]
        np.testing.assert_allclose(compute_weights([1, 2, 4]), [4 / 7, 2 / 7, 1 / 7], atol=1e-12)
        w = compute_weights([1e-6, 1e3])
        assert w[0] > 1 - 1e-8 and w.argmax() == 0

    def test_zero_areas_are_floored(self):
        np.testing.assert_allclose(compute_weights([0.0, 0.0, 0.0]), [1 / 3] * 3)
        assert np.all(np.isfinite(compute_weights([0.0, 1.0])))

    @given(areas_st)
    def test_simplex_and_argmax(self, areas):
        w = compute_weights(areas)
        assert abs(w.sum() - 1) <= 1e-9 and np.all(w >= 0)
        assert areas[int(w.argmax())] == min(areas)

    @given(areas_st, st.randoms(use_true_random=False))
    def test_permutation_equivariant(self, areas, rnd):
        perm = list(range(len(areas)))
        rnd.shuffle(perm)
        np.testing.assert_allclose(compute_weights([areas[i] for i in perm]), compute_weights(areas)[perm],
                                   rtol=1e-12)

    def test_empty(self):
        with pytest.raises(DataError):
            compute_weights([])


class TestFusionRules:
    def test_sum_examples(self):
        assert fuse_sum([[0.3, 0.7]], [1.0]).tolist() == [0.3, 0.7]
        assert fuse_sum([[1, 0], [0, 1]], [0.5, 0.5]).tolist() == [0.5, 0.5]

    def test_sum_matches_loop(self):
        rng = np.random.default_rng(0)
        s, w = rng.random((3, 50)), compute_weights(rng.random(3) + 0.1)
        oracle = [math.fsum(w[i] * s[i, j] for i in range(3)) for j in range(50)]
        np.testing.assert_allclose(fuse_sum(s, w), oracle, rtol=0, atol=1e-12)

    def test_product_examples(self):
        np.testing.assert_allclose(fuse_product([[0.3, 0.7]], [1.0]), [0.3, 0.7], rtol=1e-15)
        np.testing.assert_allclose(fuse_product([[0.64], [0.25]], [0.5, 0.5]), [0.4], rtol=1e-15)

    def test_product_floors(self):
        assert fuse_product([[0.0]], [1.0], 1e-6)[0] == pytest.approx(1e-6)

    def test_product_monotone(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            s = rng.random((3, 4))
            w = compute_weights(rng.random(3) + 0.01)
            before = fuse_product(s, w)
            i, j = rng.integers(3), rng.integers(4)
            s[i, j] += rng.random()
            assert fuse_product(s, w)[j] >= before[j]

    def test_uniform_rules_rank_like_means(self):
        rng = np.random.default_rng(2)
        s = rng.random((4, 100)) + 0.01
        u = np.full(4, 0.25)
        assert (np.argsort(-fuse_product(s, u), kind="stable") ==
                np.argsort(-np.exp(np.log(s).mean(0)), kind="stable")).all()
        assert (np.argsort(-fuse_sum(s, u), kind="stable") == np.argsort(-s.mean(0), kind="stable")).all()

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            fuse_sum([[1.0, 2.0], [1.0]], [0.5, 0.5])
        with pytest.raises(DataError):
            fuse_product([[1.0, 2.0]], [0.5, 0.5])

    def test_bad_weights(self):
        with pytest.raises(DataError):
            check_weights([0.6, 0.6])
        with pytest.raises(DataError):
            check_weights([1.5, -0.5])
        with pytest.raises(ConfigError):
            fuse([[1.0]], [1.0], rule="max")

    def test_batch_matches_single(self):
        rng = np.random.default_rng(3)
        stack = rng.random((3, 5, 20))
        w = np.vstack([compute_weights(rng.random(3) + 0.1) for _ in range(5)])
        for rule in ("sum", "product"):
            b = fuse_batch(stack, w, rule)
            for q in range(5):
                np.testing.assert_allclose(b[q], fuse(stack[:, q], w[q], rule), rtol=1e-13)


class TestQafConfig:
    @pytest.mark.parametrize("kw", [{"rule": "max"}, {"epsilon_area": 0}, {"epsilon_score": -1}, {"curve_len": 1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            QafConfig(**kw)


class TestQafQuery:
    cfg = QafConfig(match=MatchConfig(1, 40, 3), curve_len=100)

    def test_identical_features(self):
        rng = np.random.default_rng(4)
        row = rng.random(100)
        res = qaf_query([row, row], None, self.cfg)
        np.testing.assert_allclose(res.weights, [0.5, 0.5])
        assert res.ranking.tolist() == np.argsort(-row, kind="stable").tolist()

    def test_single_feature(self):
        row = np.random.default_rng(5).random(60)
        assert qaf_query([row], None, self.cfg).ranking.tolist() == np.argsort(-row, kind="stable").tolist()

    def test_all_degenerate_uniform_sum(self):
        scores = np.vstack([np.full(30, 0.5), np.full(30, 0.2), np.full(30, 0.9)])
        res = qaf_query(scores, None, QafConfig(rule="sum", curve_len=30, match=MatchConfig(1, 10)))
        np.testing.assert_allclose(res.weights, [1 / 3] * 3)
        np.testing.assert_allclose(res.fused, scores.mean(0))

    def test_scale_invariance_without_reference(self):
        row = np.random.default_rng(7).random(200)
        a = curve_area(row, None, self.cfg)
        assert curve_area(row * 37.5, None, self.cfg) == pytest.approx(a, rel=1e-12)

    def test_good_medium_bad_order(self):
        # qualitative analogue of a good/medium/random weight split
        feats = (tail_good(), tail_medium(), global_random())
        data = generate(SynthSpec(200, 1000, 4, feats, seed=21))
        cbs = codebooks_for(feats, 1000, 22, num_curves=400)
        w, _ = qaf_weights(data.tables, cbs, QafConfig())
        mean = w.mean(axis=0)
        assert mean[0] > mean[1] > mean[2]

    def test_codebook_count(self):
        with pytest.raises(DataError):
            qaf_query(np.ones((2, 10)), [None], self.cfg)


class TestBatch:
    def _tables(self, k=2, nq=6, n=50, seed=8):
        rng = np.random.default_rng(seed)
        q, g = [f"q{i}" for i in range(nq)], [f"g{j}" for j in range(n)]
        return [ScoreTable(f"f{i}", q, g, rng.random((nq, n))) for i in range(k)]

    def test_batch_equals_per_query(self):
        tables = self._tables()
        cbs = codebooks_for([global_random("f0"), global_random("f1")], 50, 3, num_curves=20)
        cfg = QafConfig(match=MatchConfig(1, 30, 3), curve_len=50)
        w, fused = qaf_fuse(tables, cbs, cfg)
        for q in range(6):
            res = qaf_query([t.scores[q] for t in tables], cbs, cfg)
            np.testing.assert_array_equal(w[q], res.weights)
            np.testing.assert_allclose(fused[q], res.fused, rtol=1e-14)
            assert rank_rows(fused)[q].tolist() == res.ranking.tolist()

    def test_codebook_pairing_checked(self):
        tables = self._tables()
        cbs = codebooks_for([global_random("f1"), global_random("f0")], 50, 3, num_curves=20)
        with pytest.raises(DataError, match="paired"):
            qaf_weights(tables, cbs, QafConfig(curve_len=50))

    def test_short_gallery_resamples_codebook(self):
        tables = self._tables(n=40)
        cbs = codebooks_for([global_random("f0"), global_random("f1")], 80, 3, num_curves=20)
        with pytest.warns(UserWarning):
            w, _ = qaf_weights(tables, cbs, QafConfig())
        assert w.shape == (6, 2) and np.allclose(w.sum(1), 1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_weights_always_valid(self, seed):
        tables = self._tables(k=3, nq=3, n=30, seed=seed)
        w, _ = qaf_weights(tables, None, QafConfig(curve_len=30))
        assert np.all(w >= 0) and np.allclose(w.sum(1), 1, atol=1e-9)

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qafusion.curves import (
    ScoreTable,
    area_under,
    downsample,
    downsample_indices,
    format_float,
    load_score_tables,
    min_max_normalize,
    sort_descending,
    write_score_table,
)
from qafusion.errors import DataError

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)
curves = st.lists(finite, min_size=1, max_size=60)


class TestSortDescending:
    def test_tie_keeps_gallery_order(self):
        c = sort_descending([0.2, 0.9, 0.9], ["a", "b", "c"])
        assert c.values.tolist() == [0.9, 0.9, 0.2]
        assert c.ranked_ids() == ["b", "c", "a"]

    def test_singleton(self):
        assert sort_descending([5.0]).values.tolist() == [5.0]

    def test_against_comparison_sort(self):
        rng = np.random.default_rng(0)
        row = rng.random(100)
        c = sort_descending(row)
        # naive oracle: sort (-score, index) tuples
        oracle = [i for _, i in sorted((-s, i) for i, s in enumerate(row.tolist()))]
        assert c.order.tolist() == oracle
        assert np.all(np.diff(c.values) <= 0)
        assert sorted(c.order.tolist()) == list(range(100))

    def test_empty(self):
        with pytest.raises(DataError, match="empty score list"):
            sort_descending([])

    def test_non_finite_names_index(self):
        with pytest.raises(DataError, match="index 2"):
            sort_descending([0.1, 0.2, float("nan")])

    @given(curves)
    def test_idempotent(self, xs):
        once = sort_descending(xs).values
        np.testing.assert_array_equal(sort_descending(once).values, once)


class TestMinMax:
    def test_examples(self):
        assert min_max_normalize([2, 1, 0]).values.tolist() == [1.0, 0.5, 0.0]
        assert min_max_normalize([0.9, 0.5, 0.1, 0.1]).values.tolist() == pytest.approx([1.0, 0.5, 0.0, 0.0])

    def test_degenerate(self):
        n = min_max_normalize([3, 3, 3])
        assert n.degenerate
        assert n.values.tolist() == [0, 0, 0]

    @given(curves)
    def test_range_and_extremes(self, xs):
        n = min_max_normalize(xs)
        if n.degenerate:
            assert np.all(n.values == 0)
        else:
            assert n.values.max() == 1.0 and n.values.min() == 0.0
            assert np.all((n.values >= 0) & (n.values <= 1))

    @given(curves)
    def test_area_bounds(self, xs):
        n = min_max_normalize(xs)
        if not n.degenerate:
            assert 1.0 <= area_under(n.values) <= len(xs) - 1

    @given(curves, st.floats(min_value=1e-3, max_value=1e3))
    def test_scale_invariant(self, xs, c):
        a, b = min_max_normalize(xs), min_max_normalize(np.asarray(xs) * c)
        if not a.degenerate and not b.degenerate:
            np.testing.assert_allclose(a.values, b.values, atol=1e-9)


class TestArea:
    def test_best_and_worst_limits(self):
        assert area_under([1, 0, 0, 0, 0]) == 1.0
        assert area_under(sort_descending([1, 1, 0, 1, 1]).values) == 4.0

    def test_uniform_sum(self):
        x = np.random.default_rng(1).random(1000)
        assert area_under(x) == pytest.approx(math.fsum(x.tolist()), abs=1e-9)
        assert abs(area_under(x) - 500) <= 3 * math.sqrt(1000 / 12)

    def test_best_curve_is_minimal(self):
        # among normalized curves of length 6 with a single 1 at rank 1, the
        # best-feature curve has the least area
        rng = np.random.default_rng(2)
        for _ in range(100):
            tail = np.sort(rng.random(5))[::-1]
            tail[-1] = 0.0
            assert area_under(np.r_[1.0, tail]) >= area_under([1, 0, 0, 0, 0, 0])


class TestDownsample:
    def test_examples(self):
        assert downsample([5, 4, 3, 2, 1], 5).tolist() == [5, 4, 3, 2, 1]
        assert downsample([9, 8, 7, 6, 5, 4, 3, 2, 1], 3).tolist() == [9, 5, 1]
        assert downsample([3, 2], 10).tolist() == [3, 2]

    def test_target_too_small(self):
        with pytest.raises(DataError):
            downsample([1, 2, 3], 1)

    def test_rounds_half_up(self):
        # 10 points -> 4: positions 0, 3, 6, 9 exactly; 11 -> 4: 0, 3.33, 6.67, 10
        assert downsample_indices(10, 4).tolist() == [0, 3, 6, 9]
        assert downsample_indices(11, 4).tolist() == [0, 3, 7, 10]
        assert downsample_indices(5, 3).tolist() == [0, 2, 4]
        assert downsample_indices(4, 3).tolist() == [0, 2, 3]  # 1.5 rounds up

    @given(st.lists(finite, min_size=2, max_size=200), st.integers(2, 50))
    def test_monotone_and_endpoints(self, xs, target):
        c = sort_descending(xs).values
        d = downsample(c, target)
        assert d[0] == c[0] and d[-1] == c[-1]
        assert np.all(np.diff(d) <= 0)
        assert d.size == min(target, c.size)

    def test_stack(self):
        x = np.arange(20.0).reshape(2, 10)
        np.testing.assert_array_equal(downsample(x, 4), x[:, [0, 3, 6, 9]])


class TestScoreTable:
    def test_shape_checked(self):
        with pytest.raises(DataError, match="shape"):
            ScoreTable("f", ["q"], ["a", "b"], [[1.0]])

    def test_non_finite(self):
        with pytest.raises(DataError, match="non-finite"):
            ScoreTable("f", ["q"], ["a"], [[math.inf]])

    def test_read_only(self):
        t = ScoreTable("f", ["q"], ["a"], [[1.0]])
        with pytest.raises(ValueError):
            t.scores[0, 0] = 2.0


class TestScoreFiles:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        t = ScoreTable("feat", ["q0", "q1"], ["g0", "g1", "g2"], rng.random((2, 3)) * 1e-3)
        write_score_table(t, tmp_path / "s.jsonl")
        back = load_score_tables(tmp_path / "s.jsonl")["feat"]
        assert back.query_ids == t.query_ids and back.gallery_ids == t.gallery_ids
        np.testing.assert_array_equal(back.scores, t.scores)

    def test_multiple_features_and_comments(self, tmp_path):
        lines = ["# header", ""]
        for f in ("a", "b"):
            for q in ("q0", "q1"):
                for g in ("x", "y"):
                    lines.append(json.dumps({"feature": f, "query": q, "gallery": g, "score": 0.5}))
        (tmp_path / "s.jsonl").write_text("\n".join(lines))
        tables = load_score_tables(tmp_path / "s.jsonl")
        assert list(tables) == ["a", "b"]
        assert tables["b"].scores.shape == (2, 2)

    def test_duplicate(self, tmp_path):
        rec = json.dumps({"feature": "a", "query": "q", "gallery": "g", "score": 1})
        (tmp_path / "s.jsonl").write_text(rec + "\n" + rec + "\n")
        with pytest.raises(DataError, match="duplicate"):
            load_score_tables(tmp_path / "s.jsonl")

    def test_ragged(self, tmp_path):
        recs = [{"feature": "a", "query": "q0", "gallery": "g0", "score": 1},
                {"feature": "a", "query": "q0", "gallery": "g1", "score": 1},
                {"feature": "a", "query": "q1", "gallery": "g0", "score": 1}]
        (tmp_path / "s.jsonl").write_text("\n".join(map(json.dumps, recs)))
        with pytest.raises(DataError, match="ragged"):
            load_score_tables(tmp_path / "s.jsonl")

    def test_malformed(self, tmp_path):
        (tmp_path / "s.jsonl").write_text('{"feature": "a"}\n')
        with pytest.raises(DataError, match="s.jsonl:1"):
            load_score_tables(tmp_path / "s.jsonl")

    @settings(max_examples=200)
    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_format_float_round_trips(self, x):
        assert float(format_float(x)) == x

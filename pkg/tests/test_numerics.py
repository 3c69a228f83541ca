import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfctc.errors import UsageError
from pfctc.numerics import log_sum_exp, nearest_rank_percentile, tempered_softmax_rows

finite = st.floats(-50, 50, allow_nan=False)


class TestLogSumExp:
    def test_single(self):
        assert log_sum_exp([0.0]) == 0.0

    def test_pair(self):
        assert log_sum_exp([1.5, 1.5]) == pytest.approx(1.5 + math.log(2), abs=1e-15)

    def test_neg_inf_absorbed(self):
        assert log_sum_exp([-math.inf, 3.25]) == 3.25

    def test_all_neg_inf(self):
        assert log_sum_exp([-math.inf, -math.inf]) == -math.inf

    def test_empty(self):
        with pytest.raises(UsageError):
            log_sum_exp([])

    def test_no_overflow(self):
        assert log_sum_exp([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2))

    @given(st.lists(finite, min_size=1, max_size=20))
    def test_matches_direct(self, xs):
        direct = math.log(sum(math.exp(x) for x in xs))
        assert abs(log_sum_exp(xs) - direct) <= 1e-12 * max(1.0, abs(direct))


class TestTemperedSoftmax:
    def test_equal_logits(self):
        for tau in (0.1, 1.0, 10.0):
            np.testing.assert_allclose(tempered_softmax_rows([[0.0, 0.0]], tau), [[0.5, 0.5]])

    def test_standard_identity(self):
        np.testing.assert_allclose(tempered_softmax_rows([[math.log(4), 0.0]], 1.0),
                                   [[0.8, 0.2]], atol=1e-15)

    def test_high_temperature_flattens(self, rng):
        out = tempered_softmax_rows(rng.normal(scale=5, size=(4, 6)), 1e6)
        np.testing.assert_allclose(out, 1 / 6, atol=1e-4)

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_tau(self, tau):
        with pytest.raises(UsageError):
            tempered_softmax_rows([[1.0, 2.0]], tau)

    @settings(max_examples=50)
    @given(st.lists(st.lists(finite, min_size=3, max_size=3), min_size=1, max_size=5),
           st.floats(0.5, 20), st.floats(-30, 30))
    def test_rows_normalized_and_shift_invariant(self, rows, tau, c):
        x = np.array(rows)
        p = tempered_softmax_rows(x, tau)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        assert (p > 0).all()
        np.testing.assert_allclose(tempered_softmax_rows(x + c, tau), p, atol=1e-12)


class TestPercentile:
    def test_examples(self):
        assert nearest_rank_percentile([100, 200, 300], 50) == 200
        assert nearest_rank_percentile([100, 200, 300], 90) == 300
        assert nearest_rank_percentile([7], 50) == 7

    def test_unsorted_input(self):
        assert nearest_rank_percentile([300, 100, 200], 50) == 200

    def test_exact_rank_boundary(self):
        # 90% of 10 is exactly rank 9
        assert nearest_rank_percentile(range(1, 11), 90) == 9

    def test_empty(self):
        with pytest.raises(UsageError):
            nearest_rank_percentile([], 50)

    @given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=30), st.floats(0.01, 100))
    def test_returns_member(self, xs, q):
        assert nearest_rank_percentile(xs, q) in xs

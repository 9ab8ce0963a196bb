import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import SMALL_NET
from weakcount.evaluate import (RUNGS, AblationTable, CountReport, UndefinedErrorRate, ablation_report,
                                always_shot_counts, baseline_always_nonshot, baseline_always_shot,
                                baseline_weighted_random, count_error_rate, error_rate, report_from_counts,
                                rung_switches, score_run)
from weakcount.preprocess import MetricConfig, extract_candidates
from weakcount.train import TrainConfig

counts_2d = st.integers(1, 6).flatmap(lambda k: st.tuples(
    st.lists(st.lists(st.integers(0, 30), min_size=k, max_size=k), min_size=1, max_size=8),
    st.lists(st.lists(st.integers(0, 30), min_size=k, max_size=k), min_size=1, max_size=8)))


def _abs_dev_moments(n, p, c):
    """Exact mean and variance of |X - c| for X ~ Binomial(n, p)."""
    k = np.arange(n + 1)
    pmf = np.array([math.comb(n, int(i)) * p ** i * (1 - p) ** (n - i) for i in k])
    d = np.abs(k - c)
    m = float(pmf @ d)
    return m, float(pmf @ d ** 2) - m * m


class TestErrorRate:
    def test_perfect(self):
        assert count_error_rate([[3, 1], [0, 2]], [[3, 1], [0, 2]]) == 0.0

    def test_single_overcount(self):
        assert count_error_rate([[4]], [[3]]) == pytest.approx(1 / 3)

    def test_formula_by_hand(self):
        est = [[2, 0], [5, 1]]
        tru = [[3, 1], [4, 1]]
        assert count_error_rate(est, tru) == pytest.approx((1 + 1 + 1 + 0) / 9)

    def test_zero_total_raises(self):
        with pytest.raises(UndefinedErrorRate):
            count_error_rate([[1]], [[0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            CountReport(("a",), np.array([[1, 2]]), np.array([[1]]))

    def test_negative_counts(self):
        with pytest.raises(ValueError):
            CountReport(("a",), np.array([[-1]]), np.array([[1]]))

    def test_nonshot_rows_excluded_and_scored_as_false_positives(self):
        rep = report_from_counts(["s", "n1", "n2"], [[3], [2], [1]], [[4], [0], [0]])
        assert rep.error_rate() == pytest.approx(1 / 4)
        assert rep.false_positives == 3
        np.testing.assert_array_equal(rep.nonshot_only, [False, True, True])

    def test_per_candidate_denominator(self):
        rep = report_from_counts(["a", "b", "n"], [[3], [1], [5]], [[4], [1], [0]], [10, 6, 7])
        assert error_rate(rep, per_candidate=True) == pytest.approx(1 / 16)
        with pytest.raises(ValueError):
            report_from_counts(["a"], [[1]], [[2]]).error_rate(per_candidate=True)

    def test_category_rates(self):
        rep = report_from_counts(["a", "b"], [[2, 0], [1, 0]], [[2, 0], [2, 0]])
        r = rep.category_error_rates()
        assert r[0] == pytest.approx(1 / 4)
        assert math.isnan(r[1])

    @settings(max_examples=200, deadline=None)
    @given(counts_2d)
    def test_nonnegative_and_zero_iff_equal(self, pair):
        est, tru = pair
        n = min(len(est), len(tru))
        est, tru = np.array(est[:n]), np.array(tru[:n])
        if tru.sum() == 0:
            return
        e = count_error_rate(est, tru)
        assert e >= 0
        shot = tru.sum(axis=1) > 0
        assert (e == 0) == bool(np.array_equal(est[shot], tru[shot]))

    @settings(max_examples=200, deadline=None)
    @given(counts_2d, st.integers(2, 5))
    def test_scale_free(self, pair, times):
        est, tru = pair
        n = min(len(est), len(tru))
        est, tru = np.array(est[:n]), np.array(tru[:n])
        if tru.sum() == 0:
            return
        e1 = count_error_rate(est, tru)
        e2 = count_error_rate(np.tile(est, (times, 1)), np.tile(tru, (times, 1)))
        assert e1 == pytest.approx(e2, rel=1e-12)


class TestBaselines:
    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 20), min_size=2, max_size=2), min_size=1, max_size=10))
    def test_always_nonshot_is_100(self, tru):
        tru = np.array(tru)
        if tru.sum() == 0:
            return
        assert baseline_always_nonshot(tru) == 1.0

    def test_always_shot_formula(self):
        assert baseline_always_shot([[4]], [10]) == pytest.approx(1.5)

    def test_always_shot_all_candidates_shots(self):
        assert baseline_always_shot([[7], [3]], [7, 3]) == 0.0

    def test_always_shot_counts_first_category(self):
        np.testing.assert_array_equal(always_shot_counts(np.array([3, 5]), 2), [[3, 0], [5, 0]])

    def test_always_shot_benchmark_hand_sum(self, small_bench):
        cfg = MetricConfig()
        num = den = 0
        n_cand, true = [], []
        for rec in small_bench:
            n = len(extract_candidates(rec.series, cfg))
            c = list(rec.label.counts)
            n_cand.append(n)
            true.append(c)
            if sum(c) == 0:
                continue
            num += abs(n - c[0]) + sum(c[1:])
            den += sum(c)
        assert baseline_always_shot(np.array(true), np.array(n_cand)) == num / den

    def test_weighted_random_frequency_zero(self):
        reps = baseline_weighted_random([[0]], [50], [[4], [2]], [10, 5], repetitions=10)
        np.testing.assert_array_equal(reps, 1.0)

    def test_weighted_random_frequency_one(self):
        reps = baseline_weighted_random([[50]], [50], [[4], [2]], [10, 5], repetitions=10)
        np.testing.assert_allclose(reps, baseline_always_shot([[4], [2]], [10, 5]))

    def test_weighted_random_deterministic_per_seed(self):
        a = baseline_weighted_random([[20]], [50], [[4], [2]], [10, 5], seed=3, repetitions=20)
        b = baseline_weighted_random([[20]], [50], [[4], [2]], [10, 5], seed=3, repetitions=20)
        np.testing.assert_array_equal(a, b)

    def test_weighted_random_matches_exact_expectation(self, small_bench):
        cfg = MetricConfig()
        n_cand = np.array([len(extract_candidates(r.series, cfg)) for r in small_bench])
        true = np.array([r.label.counts for r in small_bench])
        half = len(n_cand) // 2
        lt, lc, et, ec = true[:half], n_cand[:half], true[half:], n_cand[half:]
        p = lt.sum() / lc.sum()
        reps = baseline_weighted_random(lt, lc, et, ec, seed=11, repetitions=100)
        shot = et.sum(axis=1) > 0
        mom = [_abs_dev_moments(int(n), p, int(c[0])) for n, c in zip(ec[shot], et[shot])]
        denom = et[shot].sum()
        mean = sum(m for m, _ in mom) / denom
        sd_mean = math.sqrt(sum(v for _, v in mom)) / denom / math.sqrt(len(reps))
        assert abs(reps.mean() - mean) < 3 * sd_mean

    @pytest.mark.parametrize("eval_frac", [0.05, 0.6, 0.9])
    def test_weighted_random_grows_with_imbalance(self, eval_frac):
        # learning balance 0.3; evaluation sets of 40 series with 40 candidates each
        n = np.full(40, 40)
        matched = baseline_weighted_random([[30]], [100], np.full((40, 1), 12), n, seed=0, repetitions=50)
        shifted = baseline_weighted_random([[30]], [100], np.full((40, 1), round(40 * eval_frac)), n,
                                           seed=0, repetitions=50)
        assert shifted.mean() > matched.mean() + 5 * matched.std()

    def test_learning_set_without_candidates(self):
        with pytest.raises(ValueError):
            baseline_weighted_random([[0]], [0], [[1]], [1])


class TestAblation:
    def test_rungs_cumulative(self):
        assert len(RUNGS) == 7
        assert not any(rung_switches(0).values())
        assert all(rung_switches(6).values())
        for i in range(1, 7):
            on = [k for k, v in rung_switches(i).items() if v]
            assert len(on) == i and all(rung_switches(i + 1 if i < 6 else 6)[k] for k in on)

    def test_score_run(self):
        assert score_run(float("nan")) == 1.0
        assert score_run(1.7) == 1.0
        assert score_run(0.25) == 0.25

    def test_identical_rungs_identical_distributions(self, small_data):
        cfg = TrainConfig(max_epochs=1, qat=False, vat=False)
        table = ablation_report(small_data, SMALL_NET, cfg, seeds=2, rungs=[3, 3])
        assert table.errors.shape == (2, 2)
        np.testing.assert_array_equal(table.errors[0], table.errors[1])

    def test_table_outputs(self):
        errors = np.array([[0.3, 0.5, 0.4], [0.2, 0.1, 0.3]])
        t = AblationTable(RUNGS[:2], (0, 1, 2), errors)
        np.testing.assert_allclose(t.medians(), [0.4, 0.2])
        assert t.non_increasing_steps() == 1
        rows = list(csv.DictReader(io.StringIO(t.to_csv())))
        assert len(rows) == 6 and float(rows[1]["error_rate"]) == 0.5
        q = list(csv.DictReader(io.StringIO(t.quantiles_csv())))
        assert float(q[0]["median"]) == 0.4 and float(q[1]["max"]) == 0.3
        assert "+pretrain" in t.summary()

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retinarisk.evalsuite import (
    DEFAULT_DCA_GRID,
    MetricError,
    binary_dr,
    brier,
    c_index,
    classification_metrics,
    cohen_kappa,
    confusion,
    dca_curve,
    delong_test,
    delong_variance,
    mcc,
    metrics_report,
    net_benefit,
    net_benefit_at,
    pr_auc,
    pr_curve,
    qwk,
    roc_auc,
    youden_threshold,
)

from oracles import (
    oracle_auc,
    oracle_brier,
    oracle_c_index,
    oracle_kappa,
    oracle_mcc,
    oracle_net_benefit,
    oracle_pr_auc,
    oracle_qwk,
    oracle_youden,
    random_binary,
    random_labels,
)

N_INSTANCES = 200


@pytest.fixture
def rng():
    return np.random.default_rng(99)


class TestOracleEquivalence:
    """Every metric against an independent brute-force implementation."""

    @pytest.fixture
    def instances(self):
        r = np.random.default_rng(2024)
        return [(int(r.integers(2, 31)), int(r.integers(2, 6)), int(r.integers(0, 2**31)))
                for _ in range(N_INSTANCES)]

    def test_agreement_metrics(self, instances):
        for n, c, seed in instances:
            t, p = random_labels(np.random.default_rng(seed), n, c)
            cm = confusion(t, p, c)
            assert abs(qwk(cm) - oracle_qwk(t, p, c)) < 1e-10
            assert abs(cohen_kappa(cm) - oracle_kappa(t, p, c)) < 1e-10
            assert abs(mcc(cm) - oracle_mcc(t, p, c)) < 1e-10

    def test_ranking_metrics(self, instances):
        for n, _, seed in instances:
            r = np.random.default_rng(seed)
            s, y = random_binary(r, n, ties=bool(seed % 2))
            assert abs(roc_auc(s, y).auc - oracle_auc(s, y)) < 1e-10
            assert abs(pr_auc(s, y) - oracle_pr_auc(s, y)) < 1e-10
            assert abs(brier(s, y) - oracle_brier(s, y)) < 1e-10
            thr, j = youden_threshold(s, y)
            o_thr, o_j = oracle_youden(s, y)
            assert thr == o_thr and abs(j - o_j) < 1e-10
            for p_t in (0.05, 0.3, 0.5, 0.9):
                assert abs(net_benefit_at(s, y, p_t) - oracle_net_benefit(s, y, p_t)) < 1e-10

    def test_c_index(self, instances):
        for n, _, seed in instances:
            r = np.random.default_rng(seed)
            risk = r.integers(0, 5, n) / 4.0
            times = r.integers(1, 10, n).astype(float)
            events = r.integers(0, 2, n)
            events[0] = 1
            times[0] = 0.5
            assert abs(c_index(risk, times, events) - oracle_c_index(risk, times, events)) < 1e-10


class TestConfusion:
    def test_hand_tally(self):
        cm = confusion([0, 1, 1, 2], [0, 1, 2, 2], 3)
        np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 1], [0, 0, 1]])

    def test_single_predicted_column(self):
        cm = confusion([0, 1, 2, 2], [0, 0, 0, 0], 3)
        assert np.count_nonzero(cm.sum(axis=0)) == 1

    def test_out_of_range(self):
        with pytest.raises(MetricError):
            confusion([0, 3], [0, 1], 3)


class TestKappa:
    def test_diagonal_is_one(self):
        assert qwk(np.diag([3, 4, 5])) == 1.0

    def test_independent_marginals_is_zero(self):
        cm = np.outer([1, 2, 3], [2, 2, 1])
        assert qwk(cm) == pytest.approx(0.0, abs=1e-15)

    def test_three_class_fixture(self):
        cm = np.array([[2, 1, 0], [0, 2, 1], [0, 0, 4]])
        t = np.repeat(np.arange(3), cm.sum(axis=1))
        p = np.concatenate([np.repeat(np.arange(3), row) for row in cm])
        assert qwk(cm) == pytest.approx(oracle_qwk(t, p, 3), abs=1e-12)

    def test_single_class_flagged(self):
        flags = set()
        assert qwk(np.array([[5, 0], [0, 0]]), flags) == 0.0
        assert "qwk" in flags

    def test_unweighted_kappa_permutation_invariant(self, rng):
        t, p = random_labels(rng, 30, 4)
        perm = rng.permutation(4)
        assert cohen_kappa(confusion(perm[t], perm[p], 4)) == pytest.approx(
            cohen_kappa(confusion(t, p, 4)), abs=1e-12)

    def test_qwk_reversal_invariant(self, rng):
        t, p = random_labels(rng, 30, 5)
        assert qwk(confusion(4 - t, 4 - p, 5)) == pytest.approx(qwk(confusion(t, p, 5)), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(MetricError):
            qwk(np.zeros((3, 3)))


class TestClassification:
    def test_binary_hand_values(self):
        m = classification_metrics(np.array([[50, 10], [5, 35]]))
        assert m["sensitivity"] == pytest.approx(0.875, abs=1e-12)
        assert m["specificity"] == pytest.approx(50 / 60, abs=1e-12)
        assert m["ppv"] == pytest.approx(35 / 45, abs=1e-12)
        assert m["npv"] == pytest.approx(50 / 55, abs=1e-12)
        direct = (35 * 50 - 10 * 5) / math.sqrt(45 * 40 * 60 * 55)
        assert m["mcc"] == pytest.approx(direct, abs=1e-12)
        assert m["accuracy"] == pytest.approx(0.85)

    def test_diagonal(self):
        m = classification_metrics(np.diag([2, 3, 4, 1, 5]))
        assert m["accuracy"] == 1.0 and m["f1"] == 1.0 and m["mcc"] == 1.0

    def test_degenerate_predictor_flagged(self):
        flags = set()
        m = classification_metrics(np.array([[0, 50], [0, 50]]), flags)
        assert m["mcc"] == 0.0
        assert "mcc" in flags

    def test_macro_one_vs_rest(self):
        cm = np.array([[3, 1, 0], [1, 2, 1], [0, 0, 4]])
        m = classification_metrics(cm)
        rec = [3 / 4, 2 / 4, 4 / 4]
        spec = [7 / 8, 7 / 8, 7 / 8]
        assert m["sensitivity"] == pytest.approx(np.mean(rec))
        assert m["specificity"] == pytest.approx(np.mean(spec))
        assert m["macro_recall"] == pytest.approx(np.mean(rec))


class TestRoc:
    def test_hand_fixture(self):
        assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).auc == pytest.approx(0.75, abs=1e-9)

    def test_separated_and_tied(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]).auc == 1.0
        assert roc_auc([0.5] * 6, [0, 1, 0, 1, 0, 1]).auc == 0.5

    def test_curve_endpoints(self, rng):
        s, y = random_binary(rng, 25)
        c = roc_auc(s, y)
        assert (c.fpr[0], c.tpr[0]) == (0.0, 0.0) and (c.fpr[-1], c.tpr[-1]) == (1.0, 1.0)
        assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
        assert c.fpr.size == np.unique(s).size + 1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_monotone_transform_invariance(self, seed):
        s, y = random_binary(np.random.default_rng(seed), 20)
        assert roc_auc(np.exp(3 * s) - 7, y).auc == roc_auc(s, y).auc

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            roc_auc([0.1, 0.2], [1, 1])


class TestPr:
    def test_perfect_ranking(self):
        assert pr_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_three_point_trapezoid(self):
        # operating points (1/2, 1), (1/2, 1/2), (1, 2/3) after the (0, 1) anchor
        expect = 0.5 * (1 + 1) / 2 + 0.0 + 0.5 * (0.5 + 2 / 3) / 2
        assert pr_auc([0.9, 0.6, 0.3], [1, 0, 1]) == pytest.approx(expect, abs=1e-12)

    def test_random_scores_near_prevalence(self, rng):
        y = (rng.random(20000) < 0.3).astype(int)
        assert abs(pr_auc(rng.random(y.size), y) - y.mean()) < 0.05

    def test_no_positives(self):
        with pytest.raises(MetricError):
            pr_curve([0.1, 0.2], [0, 0])


class TestBrier:
    @pytest.mark.parametrize("p,y,expect", [([1.0, 0.0], [1, 0], 0.0), ([0.5, 0.5], [1, 0], 0.25),
                                            ([0.8, 0.3], [1, 0], 0.065)])
    def test_hand_values(self, p, y, expect):
        assert brier(p, y) == pytest.approx(expect, abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(MetricError):
            brier([1.2], [1])


class TestCIndex:
    def test_single_pair(self):
        assert c_index([0.9, 0.2], [2, 5], [1, 1]) == 1.0

    def test_all_ties(self):
        assert c_index([0.4] * 4, [1, 2, 3, 4], [1, 1, 1, 1]) == 0.5

    def test_early_censoring_excluded(self):
        r, t, e = [0.1, 0.9, 0.5], [1.0, 3.0, 5.0], [0, 1, 1]
        assert c_index(r, t, e) == oracle_c_index(r, t, e) == 1.0

    def test_no_pairs(self):
        with pytest.raises(MetricError):
            c_index([0.1, 0.2], [1, 2], [0, 0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_reflection_sums_to_one(self, seed):
        r = np.random.default_rng(seed)
        risk = r.permutation(12) / 12.0
        times = r.permutation(12) + 1.0
        events = np.r_[1, r.integers(0, 2, 11)]
        assert c_index(risk, times, events) + c_index(-risk, times, events) == pytest.approx(1.0, abs=1e-12)


class TestDecisionCurve:
    def test_hand_fixture(self):
        assert net_benefit(30, 10, 100, 0.3) == pytest.approx(0.3 - 0.1 * 3 / 7, abs=1e-9)
        assert net_benefit(30, 10, 100, 0.3) == pytest.approx(0.2571428571, abs=1e-9)

    def test_treat_none(self):
        assert net_benefit_at([0.1, 0.2, 0.05], [1, 0, 1], 0.5) == 0.0

    @pytest.mark.parametrize("p_t", [0.1, 0.5, 0.9])
    def test_no_false_positives(self, p_t):
        assert net_benefit(12, 0, 40, p_t) == pytest.approx(0.3)

    @pytest.mark.parametrize("p_t", [0.0, 1.0, -0.2])
    def test_bad_threshold(self, p_t):
        with pytest.raises(MetricError):
            net_benefit(1, 1, 10, p_t)

    def test_grid_and_bound(self, rng):
        s, y = random_binary(rng, 30, ties=False)
        curve = dca_curve(s, y)
        assert [p.p_t for p in curve] == list(DEFAULT_DCA_GRID)
        assert 0.3 in [p.p_t for p in curve]
        for p in curve:
            assert p.net_benefit <= y.mean() + 1e-12
            assert p.treat_none_benefit == 0.0
            assert p.treat_all_benefit == pytest.approx(net_benefit(y.sum(), (1 - y).sum(), y.size, p.p_t))


class TestYouden:
    def test_separated_lowest_threshold(self):
        assert youden_threshold([0.1, 0.2, 0.7, 0.9], [0, 0, 1, 1]) == (0.7, 1.0)

    def test_identical_scores(self):
        assert youden_threshold([0.4] * 4, [0, 1, 0, 1])[1] == 0.0

    def test_six_point_case(self):
        s, y = [0.2, 0.3, 0.45, 0.5, 0.7, 0.8], [0, 1, 0, 1, 0, 1]
        assert youden_threshold(s, y) == pytest.approx(oracle_youden(s, y))

    def test_exact_tie_goes_low(self):
        # cut-points 1.0 and 0.2 both give J = 1/6; float sums disagree in the last bit
        s = np.array([5, 2, 1, 2, 4, 2, 4, 2, 5, 4, 4, 2, 1, 4, 0, 2, 1, 0, 0, 2]) / 5.0
        y = [1, 0, 0, 1, 0, 1, 0, 1, 1, 1, 0, 1, 1, 1, 1, 0, 1, 0, 0, 1]
        thr, j = youden_threshold(s, y)
        assert thr == 0.2 and j == pytest.approx(1 / 6, abs=1e-15)


class TestDelong:
    def test_self_comparison(self, rng):
        s, y = random_binary(rng, 40, ties=False)
        res = delong_test(s, s, y)
        assert (res.z, res.p) == (0.0, 1.0)
        assert "zero_variance" in res.flags

    def test_auc_consistency(self, rng):
        s, y = random_binary(rng, 40, ties=False)
        res = delong_test(s, rng.random(40), y)
        assert res.auc_a == roc_auc(s, y).auc
        assert res.var_a == pytest.approx(delong_variance(s, y), rel=1e-12)
        assert 0.0 <= res.p <= 1.0

    def test_distinguishes_strong_from_random(self, rng):
        y = np.r_[np.zeros(100), np.ones(100)].astype(int)
        strong = y + rng.normal(0, 0.3, 200)
        res = delong_test(strong, rng.random(200), y)
        assert res.p < 0.01

    def test_variance_matches_bootstrap(self):
        r = np.random.default_rng(0)
        y = np.r_[np.zeros(50), np.ones(50)].astype(int)
        s = y * 0.8 + r.normal(0, 1, 100)
        boot = []
        for _ in range(2000):
            idx = r.integers(0, 100, 100)
            if 0 < y[idx].sum() < 100:
                boot.append(roc_auc(s[idx], y[idx]).auc)
        rel = abs(delong_variance(s, y) - np.var(boot, ddof=1)) / np.var(boot, ddof=1)
        assert rel < 0.15


class TestReport:
    def test_perfect_predictions(self):
        grades = np.array([0, 1, 2, 3, 4, 0, 2])
        probs = np.eye(5)[grades]
        rep = metrics_report(grades, probs)
        assert rep.values["accuracy"] == 1.0 and rep.values["qwk"] == 1.0
        assert rep.values["auc_roc"] == 1.0 and rep.values["c_index"] is None

    def test_binary_remapping(self):
        probs = np.array([[0.9, 0.1, 0, 0, 0], [0.2, 0.8, 0, 0, 0]])
        score, label = binary_dr(probs, [0, 3])
        np.testing.assert_allclose(score, [0.1, 0.8])
        np.testing.assert_array_equal(label, [0, 1])

    def test_single_class_binary_is_flagged(self):
        probs = np.full((3, 5), 0.2)
        rep = metrics_report([2, 3, 4], probs)
        assert rep.values["auc_roc"] is None
        assert "single_class_binary" in rep.flags

    def test_survival_columns(self, rng):
        grades = np.array([0, 1, 2, 4, 0, 3])
        probs = rng.dirichlet(np.ones(5), 6)
        rep = metrics_report(grades, probs, risk=rng.random(6), times=np.arange(1.0, 7.0),
                             events=np.ones(6, dtype=int))
        assert 0.0 <= rep.values["c_index"] <= 1.0
        d = rep.to_dict()
        assert d["n"] == 6 and len(d["confusion"]) == 5

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            metrics_report([0, 1], np.ones((3, 5)) / 5)

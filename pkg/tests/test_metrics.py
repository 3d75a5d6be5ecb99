import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mloc.catalog import OTHER
from mloc.errors import PreconditionError
from mloc.metrics import (
    ClassMetrics,
    ConfusionMatrix,
    MetricsReport,
    confusion,
    evaluate,
    format_report,
    macro_average,
    per_class_metrics,
    roc_curve,
    roc_curves,
    write_roc_points,
)


def cm_from(counts, labels=None):
    counts = np.asarray(counts, dtype=np.int64)
    return ConfusionMatrix(counts, labels or list(range(1, len(counts) + 1)))


def mann_whitney(scores, positives):
    """Fraction of (positive, negative) pairs ranked correctly; ties count half."""
    pos = [s for s, p in zip(scores, positives) if p]
    neg = [s for s, p in zip(scores, positives) if not p]
    total = 0.0
    for a, b in itertools.product(pos, neg):
        total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


class TestConfusion:
    def test_perfect_three_class(self):
        labels = [1, 2, 3] * 3
        cm = confusion(labels, labels)
        np.testing.assert_array_equal(np.diag(cm.counts)[:3], [3, 3, 3])
        assert cm.counts.sum() == 9 == cm.total

    def test_six_items_two_errors(self):
        truth = [1, 1, 2, 2, 3, 3]
        pred = [1, 2, 2, 2, 3, 0]
        cm = confusion(pred, truth)
        i1, i2, i3, io = (cm.labels.index(c) for c in (1, 2, 3, OTHER))
        assert cm.counts[i1, i1] == 1 and cm.counts[i1, i2] == 1
        assert cm.counts[i2, i2] == 2
        assert cm.counts[i3, i3] == 1 and cm.counts[i3, io] == 1
        assert cm.total == 6
        assert cm.tp()[i2] == 2 and cm.fp()[i2] == 1 and cm.fn()[i2] == 0 and cm.tn()[i2] == 3
        assert cm.fn()[i3] == 1 and cm.fp()[io] == 1

    def test_errors(self):
        with pytest.raises(PreconditionError):
            confusion([], [])
        with pytest.raises(PreconditionError):
            confusion([1, 2], [1])
        with pytest.raises(PreconditionError):
            confusion([11], [1])

    @given(st.lists(st.tuples(st.integers(0, 10), st.integers(0, 10)), min_size=1, max_size=60))
    def test_cells_reconstruct_counts(self, pairs):
        pred, truth = zip(*pairs)
        cm = confusion(pred, truth)
        assert cm.counts.sum() == len(pairs)
        np.testing.assert_array_equal(cm.tp() + cm.fn(), cm.counts.sum(axis=1))
        np.testing.assert_array_equal(cm.tp() + cm.fp() + cm.fn() + cm.tn(), np.full(len(cm.labels), len(pairs)))


class TestPerClass:
    def test_two_class_hand_matrix(self):
        report = per_class_metrics(cm_from([[8, 2], [1, 9]]))
        c1 = report.by_label(1)
        assert c1.precision == pytest.approx(8 / 9, abs=1e-12)
        assert c1.recall == pytest.approx(0.8, abs=1e-12)
        assert c1.specificity == pytest.approx(0.9, abs=1e-12)
        assert c1.f1 == pytest.approx(16 / 19, abs=1e-12)
        assert c1.accuracy_literal == pytest.approx(8 / 20, abs=1e-12)
        assert c1.accuracy == pytest.approx(17 / 20, abs=1e-12)
        assert c1.balanced_auc == pytest.approx(0.85, abs=1e-12)
        c2 = report.by_label(2)
        assert c2.precision == pytest.approx(9 / 11, abs=1e-12)
        assert c2.recall == pytest.approx(0.9, abs=1e-12)

    def test_balanced_auc_substitution(self):
        # class 1: 4 of 5 found (recall 0.8), 2 of 5 negatives wrongly claimed (specificity 0.6)
        c1 = per_class_metrics(cm_from([[4, 1], [2, 3]])).by_label(1)
        assert c1.recall == pytest.approx(0.8) and c1.specificity == pytest.approx(0.6)
        assert c1.balanced_auc == pytest.approx(0.7, abs=1e-12)

    def test_f1_half(self):
        # precision 1/2, recall 1/2
        c1 = per_class_metrics(cm_from([[1, 1], [1, 1]])).by_label(1)
        assert c1.f1 == pytest.approx(0.5, abs=1e-12)

    def test_zero_denominator_is_flagged(self):
        report = per_class_metrics(cm_from([[3, 0], [2, 0]]))
        c2 = report.by_label(2)
        assert c2.precision == 0.0 and "precision" in c2.flags
        assert c2.f1 == 0.0 and "f1" in c2.flags

    def test_three_class_brute_force(self):
        counts = np.array([[5, 1, 0], [2, 6, 1], [0, 3, 7]])
        report = per_class_metrics(cm_from(counts))
        n = counts.sum()
        R, P, S = [], [], []
        for i in range(3):
            tp = counts[i][i]
            fp = sum(counts[r][i] for r in range(3)) - tp
            fn = sum(counts[i]) - tp
            tn = n - tp - fp - fn
            p, r, s = tp / (tp + fp), tp / (tp + fn), tn / (tn + fp)
            c = report.by_label(i + 1)
            assert c.precision == pytest.approx(p, abs=1e-12)
            assert c.recall == pytest.approx(r, abs=1e-12)
            assert c.specificity == pytest.approx(s, abs=1e-12)
            assert c.f1 == pytest.approx(2 * r * p / (r + p), abs=1e-12)
            assert c.accuracy_literal == pytest.approx(tp / n, abs=1e-12)
            assert c.accuracy == pytest.approx((tp + tn) / n, abs=1e-12)
            R.append(r), P.append(p), S.append(s)
        r, p, s = sum(R) / 3, sum(P) / 3, sum(S) / 3
        assert report.macro_f1 == pytest.approx(2 * r * p / (r + p), abs=1e-12)
        assert report.macro_auc == pytest.approx((r + s) / 2, abs=1e-12)
        assert report.overall_accuracy == pytest.approx(18 / 25, abs=1e-12)

    @given(st.lists(st.tuples(st.integers(0, 10), st.integers(0, 10)), min_size=1, max_size=60))
    def test_rates_in_unit_interval(self, pairs):
        pred, truth = zip(*pairs)
        report = evaluate(pred, truth)
        for c in report.classes:
            for v in (c.precision, c.recall, c.specificity, c.f1, c.accuracy_literal,
                      c.accuracy, c.balanced_auc):
                assert 0.0 <= v <= 1.0
        for v in (report.macro_f1, report.macro_auc, report.overall_accuracy):
            assert 0.0 <= v <= 1.0 + 1e-12

    @given(st.lists(st.tuples(st.integers(0, 10), st.integers(0, 10)), min_size=1, max_size=60))
    def test_summed_literal_accuracy_is_fraction_correct(self, pairs):
        pred, truth = zip(*pairs)
        report = evaluate(pred, truth)
        correct = sum(p == t for p, t in pairs)
        assert report.overall_accuracy == correct / len(pairs)
        assert sum(c.accuracy_literal for c in report.classes) == pytest.approx(correct / len(pairs), abs=1e-12)


class TestMacro:
    def test_perfect(self):
        labels = [1, 2, 3, 5, 5, 9, OTHER]
        report = evaluate(labels, labels)
        assert report.macro_f1 == 1.0
        assert report.macro_auc == 1.0
        assert report.overall_accuracy == 1.0

    def test_single_class(self):
        report = evaluate([4, 4, 5], [4, 4, 4])
        assert "single-class" in report.flags
        c4 = report.by_label(4)
        assert report.macro_f1 == pytest.approx(c4.f1)
        assert report.mean_recall == c4.recall

    def test_macro_only_uses_classes_with_items(self):
        report = macro_average(MetricsReport([
            ClassMetrics(1, 4, 1.0, 0.5, 1.0, 2 / 3, 0.2, 0.8, 0.75),
            ClassMetrics(2, 0, 0.0, 0.0, 0.9, 0.0, 0.0, 0.9, 0.45),
        ], 10))
        assert report.mean_recall == 0.5 and report.mean_precision == 1.0


class TestRoc:
    def test_perfect_separation(self):
        roc = roc_curve([0.9, 0.8, 0.7, 0.1, 0.2], [1, 1, 1, 0, 0])
        assert roc.area == 1.0

    def test_all_equal_scores(self):
        roc = roc_curve([0.5] * 6, [1, 0, 1, 0, 0, 1])
        assert roc.area == 0.5

    def test_ten_item_hand_case(self):
        scores = [-0.10, -0.35, -0.20, -0.60, -0.15, -0.50, -0.40, -0.05, -0.70, -0.30]
        positives = [1, 0, 1, 0, 0, 1, 0, 1, 0, 0]
        # 4 positives x 6 negatives: -0.05 and -0.10 beat all 6, -0.20 beats 5
        # (not -0.15), -0.50 beats 2 (-0.60, -0.70) -> 19 of 24
        assert mann_whitney(scores, positives) == pytest.approx(19 / 24)
        assert roc_curve(scores, positives).area == pytest.approx(19 / 24, abs=1e-12)

    def test_random_tie_free_matches_pairwise_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            n = int(rng.integers(5, 60))
            scores = rng.normal(size=n)
            positives = rng.random(n) < 0.4
            positives[0], positives[1] = True, False
            roc = roc_curve(scores, positives)
            assert abs(roc.area - mann_whitney(scores, positives)) < 1e-12

    def test_ties_get_half_credit(self):
        scores = [1, 1, 0, 2, 1]
        positives = [1, 0, 0, 1, 1]
        assert roc_curve(scores, positives).area == pytest.approx(mann_whitney(scores, positives))

    def test_monotone_and_bounded(self):
        rng = np.random.default_rng(2)
        roc = roc_curve(rng.integers(0, 5, 40), rng.random(40) < 0.5)
        assert np.all(np.diff(roc.fpr) >= 0) and np.all(np.diff(roc.tpr) >= 0)
        assert roc.fpr[0] == roc.tpr[0] == 0.0 and roc.fpr[-1] == roc.tpr[-1] == 1.0
        assert 0.0 <= roc.area <= 1.0

    def test_single_class_truth_is_undefined(self):
        roc = roc_curve([0.1, 0.2], [1, 1])
        assert not roc.defined and np.isnan(roc.area)

    def test_curves_per_class(self, tmp_path):
        truth = [1, 1, 2, 2]
        scores = {1: [-0.1, -0.2, -0.6, -0.7], 2: [-0.8, -0.9, -0.3, -0.2]}
        rocs = roc_curves(scores, truth)
        assert rocs[1].area == rocs[2].area == 1.0
        path = tmp_path / "roc.csv"
        write_roc_points(path, rocs)
        lines = path.read_text().splitlines()
        assert lines[0] == "#class,threshold,fpr,tpr"
        assert lines[1] == "Esophagus,inf,0.0,0.0"


class TestReport:
    def test_format(self):
        report = evaluate([1, 2, 2, 0], [1, 2, 3, 3])
        text = format_report(report)
        assert text.startswith("items=4\n")
        assert "macro_f1=" in text and "overall_accuracy=0.5\n" in text
        rows = [l for l in text.splitlines() if l.startswith(("Esophagus", "Cardia", "Angularis", "Other"))]
        assert len(rows) == 4
        assert "Pylorus" not in text

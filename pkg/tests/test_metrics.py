"""Tests for confusion matrices and derived metrics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volformer import metrics as ME
from volformer.errors import UsageError

# the worked example used throughout: 10 samples, 8 correct
TRUE = [0, 0, 1, 1, 2, 2, 2, 1, 0, 2]
PRED = [0, 1, 1, 1, 2, 2, 0, 1, 0, 2]


class TestConfusion:
    def test_hand_counted_matrix(self):
        cm = ME.confusion(TRUE, PRED, num_classes=3)
        assert np.trace(cm.counts) == 8
        assert cm.total == 10
        tp, fp, fn, tn = cm.one_vs_rest(0)
        assert (tp, fp, fn) == (2, 1, 1)
        assert tn == 10 - 2 - 1 - 1

    def test_perfect_predictions_are_diagonal(self):
        cm = ME.confusion(TRUE, TRUE, num_classes=3)
        assert (cm.counts == np.diag(np.diag(cm.counts))).all()
        assert ME.accuracy(cm) == 1.0

    def test_single_sample(self):
        cm = ME.confusion([1], [2], num_classes=3)
        assert cm.counts.sum() == 1
        assert cm.counts[1, 2] == 1

    def test_length_mismatch_rejected(self):
        with pytest.raises(UsageError):
            ME.confusion([0, 1], [0], num_classes=3)


class TestScalarMetrics:
    def test_precision_recall_from_hand_matrix(self):
        cm = ME.confusion(TRUE, PRED, num_classes=3)
        tp, fp, fn, _ = cm.one_vs_rest(0)
        assert ME.precision(tp, fp) == pytest.approx(2 / 3)
        assert ME.recall(tp, fn) == pytest.approx(2 / 3)

    def test_degenerate_conventions(self):
        assert ME.precision(0, 0) == 0.0
        assert ME.recall(0, 0) == 0.0
        assert ME.f1(0.0, 0.0) == 0.0
        assert ME.precision(3, 0) == 1.0
        assert ME.recall(3, 0) == 1.0

    def test_f1_values(self):
        assert ME.f1(1.0, 0.5) == pytest.approx(2 / 3)
        for x in (0.2, 0.5, 0.9):
            assert ME.f1(x, x) == pytest.approx(x)

    def test_accuracy_values(self):
        cm = ME.confusion(TRUE, PRED, num_classes=3)
        assert ME.accuracy(cm) == pytest.approx(0.8)
        with pytest.raises(UsageError):
            ME.accuracy(ME.ConfusionMatrix(np.zeros((2, 2), np.int64)))

    def test_random_predictions_approach_chance(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 3, size=10_000)
        p = rng.integers(0, 3, size=10_000)
        assert abs(ME.accuracy(ME.confusion(y, p, 3)) - 1 / 3) < 0.05


class TestReport:
    def test_single_fold_zero_dispersion(self):
        rep = ME.report([ME.confusion(TRUE, PRED, 3)])
        assert rep.accuracy_std == 0.0
        assert rep.accuracy_mean == pytest.approx(0.8)

    def test_two_fold_sample_std(self):
        """Fold accuracies 0.8 and 1.0: mean 0.9, sample std 0.1414."""
        cm1 = ME.confusion(TRUE, PRED, 3)
        cm2 = ME.confusion(TRUE, TRUE, 3)
        rep = ME.report([cm1, cm2])
        assert rep.accuracy_mean == pytest.approx(0.9)
        assert rep.accuracy_std == pytest.approx(np.sqrt(0.02), abs=1e-6)

    def test_json_schema_fields(self):
        rep = ME.report([ME.confusion(TRUE, PRED, 3)])
        doc = rep.to_dict()
        assert set(doc) == {"accuracy_mean", "accuracy_std", "per_class",
                            "macro", "micro", "confusion"}
        assert all(set(row) == {"name", "precision", "recall", "f1"}
                   for row in doc["per_class"])
        assert set(doc["macro"]) == {"precision", "recall", "f1"}
        assert np.asarray(doc["confusion"]).shape == (3, 3)

    def test_values_in_unit_interval(self):
        rep = ME.report([ME.confusion(TRUE, PRED, 3)])
        doc = rep.to_dict()
        values = [doc["accuracy_mean"], doc["accuracy_std"],
                  *doc["macro"].values(), *doc["micro"].values()]
        for row in doc["per_class"]:
            values += [row["precision"], row["recall"], row["f1"]]
        assert all(0.0 <= v <= 1.0 for v in values)

    def test_macro_f1_bounded_by_class_f1(self):
        rep = ME.report([ME.confusion(TRUE, PRED, 3)])
        per_class_f1 = [row["f1"] for row in rep.per_class]
        assert min(per_class_f1) <= rep.macro["f1"] <= max(per_class_f1)

    def test_text_rendering_includes_normalized_rows(self):
        text = ME.report([ME.confusion(TRUE, PRED, 3)]).render_text()
        assert "row-normalized (%)" in text
        assert "66.7" in text  # class NC: 2 of 3 correct


def metrics_by_direct_iteration(y_true, y_pred, num_classes):
    """Second, independent path: iterate pairs and count per class."""
    out = []
    for c in range(num_classes):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((tp, fp, fn, prec, rec, f1))
    acc = sum(1 for t, p in zip(y_true, y_pred) if t == p) / len(y_true)
    return out, acc


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)),
                min_size=1, max_size=60))
def test_two_path_equivalence(pairs):
    """Matrix-derived metrics equal direct pair iteration exactly."""
    y_true = [t for t, _ in pairs]
    y_pred = [p for _, p in pairs]
    cm = ME.confusion(y_true, y_pred, num_classes=3)
    direct, acc = metrics_by_direct_iteration(y_true, y_pred, 3)
    assert ME.accuracy(cm) == acc
    for c, (tp, fp, fn, prec, rec, f1) in enumerate(direct):
        got_tp, got_fp, got_fn, _ = cm.one_vs_rest(c)
        assert (got_tp, got_fp, got_fn) == (tp, fp, fn)
        assert ME.precision(got_tp, got_fp) == prec
        assert ME.recall(got_tp, got_fn) == rec
        assert ME.f1(ME.precision(got_tp, got_fp), ME.recall(got_tp, got_fn)) == f1

import itertools

import numpy as np
import pytest

from tabssl.errors import ConfigError
from tabssl.metrics import (
    MetricsReport,
    MetricUndefinedError,
    accuracy,
    aggregate_seeds,
    confusion,
    evaluate,
    macro_auroc,
    macro_precision_f1,
)


# -- confusion ------------------------------------------------------------------


def test_confusion_perfect_is_diagonal():
    y = np.array([0, 1, 2, 1])
    m = confusion(y, y, 3)
    assert np.array_equal(m, np.diag([1, 2, 1]))


def test_confusion_direct_count():
    m = confusion(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), 2)
    assert np.array_equal(m, [[1, 1], [0, 2]])


def test_confusion_sums_to_n():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 4, size=57)
    p = rng.integers(0, 4, size=57)
    assert confusion(y, p, 4).sum() == 57


def test_accuracy_equals_confusion_trace():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 3, size=40)
    p = rng.integers(0, 3, size=40)
    assert accuracy(y, p) == np.trace(confusion(y, p, 3)) / 40


# -- accuracy -------------------------------------------------------------------


def test_accuracy_examples():
    assert accuracy(np.array([1, 2]), np.array([1, 2])) == 1.0
    assert accuracy(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1])) == 0.75
    assert accuracy(np.array([0, 0]), np.array([1, 1])) == 0.0


def test_accuracy_empty_raises():
    with pytest.raises(ConfigError):
        accuracy(np.array([]), np.array([]))


# -- macro precision / F1 -----------------------------------------------------------


def test_macro_precision_f1_hand_computed():
    p, f1 = macro_precision_f1(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]), 2)
    assert p == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)
    assert f1 == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-12)


def test_macro_perfect():
    y = np.array([0, 1, 2, 0])
    assert macro_precision_f1(y, y, 3) == (1.0, 1.0)


def test_macro_never_predicted_class_counts_as_zero():
    # class 1 never predicted: its precision 0 drags the mean down
    y = np.array([0, 1, 0, 1])
    pred = np.array([0, 0, 0, 0])
    p, f1 = macro_precision_f1(y, pred, 2)
    assert p == pytest.approx(0.25)  # (0.5 + 0) / 2
    assert np.isfinite(f1)


def test_macro_relabeling_invariance():
    rng = np.random.default_rng(2)
    y = rng.integers(0, 3, size=60)
    pred = rng.integers(0, 3, size=60)
    base = macro_precision_f1(y, pred, 3)
    perm = np.array([2, 0, 1])
    permuted = macro_precision_f1(perm[y], perm[pred], 3)
    assert base == pytest.approx(permuted, abs=1e-12)


# -- macro AUROC ----------------------------------------------------------------------


def _pairwise_auroc(y_bin, scores):
    # plain concordant/discordant/tie enumeration
    pos = [s for s, t in zip(scores, y_bin) if t]
    neg = [s for s, t in zip(scores, y_bin) if not t]
    total = 0.0
    for sp, sn in itertools.product(pos, neg):
        total += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
    return total / (len(pos) * len(neg))


def test_auroc_perfect_separation():
    y = np.array([0, 0, 1, 1])
    scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9], [0.2, 0.8]])
    assert macro_auroc(y, scores) == 1.0


def test_auroc_constant_scores_are_half():
    y = np.array([0, 1, 0, 1])
    scores = np.full((4, 2), 0.5)
    assert macro_auroc(y, scores) == 0.5


def test_auroc_example_with_enumeration_oracle():
    y = np.array([0, 0, 1])
    class1 = np.array([0.1, 0.4, 0.3])
    scores = np.stack([1 - class1, class1], axis=1)
    assert _pairwise_auroc(y == 1, class1) == 0.5
    assert macro_auroc(y, scores) == pytest.approx(0.5)


def test_auroc_matches_enumeration_on_random_data():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 3, size=30)
    scores = rng.random((30, 3))
    got = macro_auroc(y, scores)
    want = np.mean([_pairwise_auroc(y == c, scores[:, c]) for c in range(3)])
    assert got == pytest.approx(want, abs=1e-12)


def test_auroc_monotone_transform_invariance():
    rng = np.random.default_rng(4)
    y = rng.integers(0, 2, size=40)
    scores = rng.random((40, 2))
    assert macro_auroc(y, scores) == pytest.approx(
        macro_auroc(y, np.exp(5 * scores)), abs=1e-12)


def test_auroc_skips_absent_class_with_warning(caplog):
    y = np.array([0, 0, 1, 1])  # class 2 absent
    rng = np.random.default_rng(5)
    scores = rng.random((4, 3))
    with caplog.at_level("WARNING"):
        got = macro_auroc(y, scores)
    assert np.isfinite(got)
    assert any("skip" in r.message.lower() for r in caplog.records)


def test_auroc_all_skipped_is_undefined():
    y = np.zeros(4, dtype=np.int64)
    scores = np.random.default_rng(6).random((4, 2))
    with pytest.raises(MetricUndefinedError):
        macro_auroc(y, scores)


# -- evaluate / aggregate -----------------------------------------------------------


def test_evaluate_no_nan_on_degenerate_predictions():
    y = np.array([0, 1, 0, 1])
    probs = np.tile([1.0, 0.0], (4, 1))  # always predicts class 0
    rep = evaluate(y, probs, seed=0)
    for v in (rep.accuracy, rep.macro_f1, rep.macro_precision, rep.macro_auroc):
        assert np.isfinite(v)
        assert 0.0 <= v <= 1.0


def test_evaluate_argmax_tie_breaks_low():
    y = np.array([0, 0, 0, 1])
    probs = np.full((4, 2), 0.5)
    rep = evaluate(y, probs, seed=0)
    assert rep.accuracy == 0.75  # ties go to class 0, so the three 0s match


def _rep(acc, seed):
    return MetricsReport(accuracy=acc, macro_auroc=acc, macro_f1=acc,
                         macro_precision=acc, n_test=10, seed=seed)


def test_aggregate_identical_reports():
    agg = aggregate_seeds([_rep(0.8, 0), _rep(0.8, 1)])
    assert agg["accuracy"] == (0.8, 0.0)


def test_aggregate_closed_form():
    agg = aggregate_seeds([_rep(0.7, 0), _rep(0.8, 1)])
    mean, sd = agg["accuracy"]
    assert mean == pytest.approx(0.75)
    assert sd == pytest.approx(0.0707, abs=1e-4)


def test_aggregate_matches_two_pass_oracle():
    rng = np.random.default_rng(7)
    vals = rng.random(10)
    agg = aggregate_seeds([_rep(v, i) for i, v in enumerate(vals)])
    mean = vals.sum() / 10
    sd = np.sqrt(((vals - mean) ** 2).sum() / 9)
    assert agg["accuracy"][0] == pytest.approx(mean, abs=1e-12)
    assert agg["accuracy"][1] == pytest.approx(sd, abs=1e-12)


def test_aggregate_single_seed_warns(caplog):
    with caplog.at_level("WARNING"):
        agg = aggregate_seeds([_rep(0.5, 0)])
    assert agg["accuracy"] == (0.5, 0.0)
    assert any("single seed" in r.message for r in caplog.records)

"""Multiclass evaluation metrics and cross-seed aggregation.

All macro metrics use explicit zero-division conventions so that sparse
predictions (common at 1% labels) never produce NaN:

* precision of a never-predicted class is 0;
* F1 is 0 when precision + recall is 0;
* macro precision/F1 average over classes present in y_true or y_pred;
* AUROC skips classes lacking a positive or a negative (with a warning)
  and averages the rest.

AUROC uses the rank formulation with midpoint handling of ties.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


class MetricUndefinedError(DataError):
    """No class had both a positive and a negative sample."""


@dataclass
class MetricsReport:
    """Evaluation of one (experiment, model, seed) cell."""

    accuracy: float
    macro_auroc: float
    macro_f1: float
    macro_precision: float
    n_test: int
    seed: int
    per_class: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auroc": self.macro_auroc,
            "f1": self.macro_f1,
            "precision": self.macro_precision,
        }


def _check_labels(y, C, name):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ConfigError(f"{name} must be 1-d, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ConfigError(f"{name} must be integer class indices, got {y.dtype}")
    if y.size and (y.min() < 0 or y.max() >= C):
        raise IndexError(f"{name} contains labels outside [0, {C})")
    return y


def confusion(y_true, y_pred, C: int) -> np.ndarray:
    """Confusion matrix; rows are true classes, columns predictions."""
    y_true = _check_labels(y_true, C, "y_true")
    y_pred = _check_labels(y_pred, C, "y_pred")
    if y_true.shape != y_pred.shape:
        raise ConfigError(
            f"length mismatch: {y_true.shape[0]} true vs {y_pred.shape[0]} predicted"
        )
    m = np.zeros((C, C), dtype=np.int64)
    np.add.at(m, (y_true, y_pred), 1)
    return m


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ConfigError("accuracy of an empty prediction set is undefined")
    if y_true.shape != y_pred.shape:
        raise ConfigError(
            f"length mismatch: {y_true.shape[0]} true vs {y_pred.shape[0]} predicted"
        )
    return float(np.mean(y_true == y_pred))


def macro_precision_f1(y_true, y_pred, C: int) -> tuple:
    """Macro precision and macro F1 over classes present in either vector.

    Per class: P = tp/(tp+fp) (0 when nothing predicted), R = tp/(tp+fn),
    F1 = 2PR/(P+R) (0 when both are 0). The macro mean is unweighted.
    """
    if C < 2:
        raise ConfigError(f"macro metrics need C >= 2, got {C}")
    m = confusion(y_true, y_pred, C)
    present = np.flatnonzero((m.sum(axis=1) + m.sum(axis=0)) > 0)
    precisions, f1s = [], []
    for c in present:
        tp = m[c, c]
        fp = m[:, c].sum() - tp
        fn = m[c, :].sum() - tp
        p = tp / (tp + fp) if tp + fp > 0 else 0.0
        r = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        precisions.append(p)
        f1s.append(f1)
    return float(np.mean(precisions)), float(np.mean(f1s))


def _binary_auroc(y_bin: np.ndarray, s: np.ndarray) -> float:
    """One-vs-rest AUROC by the Mann-Whitney rank formulation (midpoint ties)."""
    n_pos = int(y_bin.sum())
    n_neg = y_bin.size - n_pos
    ranks = rankdata(s, method="average")
    rank_sum = float(ranks[y_bin].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def macro_auroc(y_true, scores) -> float:
    """Macro one-vs-rest AUROC.

    Classes without at least one positive and one negative are skipped
    with a warning; if nothing is scorable, raises MetricUndefinedError.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ConfigError(f"scores must be [n, C], got shape {scores.shape}")
    n, C = scores.shape
    y_true = _check_labels(y_true, C, "y_true")
    if y_true.shape[0] != n:
        raise ConfigError(f"length mismatch: {y_true.shape[0]} labels vs {n} score rows")
    per_class = []
    skipped = []
    for c in range(C):
        y_bin = y_true == c
        n_pos = int(y_bin.sum())
        if n_pos == 0 or n_pos == n:
            skipped.append(c)
            continue
        per_class.append(_binary_auroc(y_bin, scores[:, c]))
    if skipped:
        log.warning(
            "macro_auroc: skipped %d class(es) without both positives and negatives: %s",
            len(skipped),
            skipped,
        )
    if not per_class:
        raise MetricUndefinedError(
            "AUROC undefined: no class has both positive and negative samples"
        )
    return float(np.mean(per_class))


def evaluate(y_true, probs, seed: int = 0) -> MetricsReport:
    """All four metrics from class-probability scores (argmax for labels).

    Argmax ties break toward the lowest class index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true)
    y_pred = probs.argmax(axis=1)
    C = probs.shape[1]
    prec, f1 = macro_precision_f1(y_true, y_pred, C)
    m = confusion(y_true, y_pred, C)
    per_class = {
        "support": m.sum(axis=1).tolist(),
        "predicted": m.sum(axis=0).tolist(),
        "correct": np.diag(m).tolist(),
    }
    return MetricsReport(
        accuracy=accuracy(y_true, y_pred),
        macro_auroc=macro_auroc(y_true, probs),
        macro_f1=f1,
        macro_precision=prec,
        n_test=int(y_true.shape[0]),
        seed=seed,
        per_class=per_class,
    )


def aggregate_seeds(reports: list) -> dict:
    """Mean and sample standard deviation (ddof=1) per metric.

    A single report aggregates with sd 0 and a warning.
    """
    if not reports:
        raise ConfigError("aggregate_seeds needs at least one report")
    if len(reports) == 1:
        log.warning("aggregate_seeds: single seed, reporting sd=0")
    out = {}
    for key in ("accuracy", "auroc", "f1", "precision"):
        values = np.array([r.row()[key] for r in reports], dtype=np.float64)
        mean = float(values.mean())
        sd = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        out[key] = (mean, sd)
    return out

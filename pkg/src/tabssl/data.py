"""Data ingestion, splits, preprocessing, and missingness synthesis.

The loader ingests UTF-8 delimited text (tab or comma, auto-detected from
the header): one header row, sample-id column first, a configurable label
column, and numeric feature columns. Empty cells mark missing values.

All fitted transforms (standardization, PCA, imputation statistics) are
fitted on training rows only and are immutable afterwards; applying them
never recomputes moments. Splits are stratified per class with
largest-remainder rounding and derive deterministically from one seed.
"""

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ConfigError,
    IntegrityError,
    NumericError,
    ParseError,
    ShapeError,
    StratificationError,
    TaskError,
)
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass
class TabularDataset:
    """An expression table: ids, features, integer class labels.

    `missing_mask` (true = missing) is present only when the source had
    empty cells; masked cells hold NaN and must not be read except by
    imputation.
    """

    sample_ids: list
    X: np.ndarray
    y: np.ndarray
    feature_names: list
    class_names: list
    missing_mask: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        n = len(self.sample_ids)
        if self.X.shape[0] != n or self.y.shape[0] != n:
            raise ShapeError(
                f"inconsistent dataset sizes: {n} ids, X {self.X.shape}, y {self.y.shape}"
            )
        if len(set(self.sample_ids)) != n:
            raise IntegrityError("duplicate sample ids")
        if self.X.shape[1] != len(self.feature_names):
            raise ShapeError(
                f"{len(self.feature_names)} feature names for X {self.X.shape}"
            )
        if n and (self.y.min() < 0 or self.y.max() >= len(self.class_names)):
            raise IntegrityError("class index out of range of class_names")
        if self.missing_mask is not None:
            self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
            if self.missing_mask.shape != self.X.shape:
                raise ShapeError("missing_mask shape does not match X")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def take(self, idx) -> "TabularDataset":
        """Row subset as a new dataset (classes and names preserved)."""
        idx = np.asarray(idx, dtype=np.intp)
        return TabularDataset(
            sample_ids=[self.sample_ids[i] for i in idx],
            X=self.X[idx],
            y=self.y[idx],
            feature_names=self.feature_names,
            class_names=self.class_names,
            missing_mask=None if self.missing_mask is None else self.missing_mask[idx],
        )


@dataclass
class SplitPlan:
    """Seed-derived index sets; all arrays are sorted ascending."""

    test_idx: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    labelled_idx: np.ndarray
    seed: int
    label_fraction: float
    set1_idx: np.ndarray | None = None
    set2_idx: np.ndarray | None = None


def _sniff_delimiter(header_line: str) -> str:
    return "\t" if "\t" in header_line else ","


def load_table(path, label_column: str = "label", delimiter: str | None = None) -> TabularDataset:
    """Load a delimited expression table.

    Layout: header row; first column sample id; `label_column` anywhere
    among the rest; remaining columns are numeric features in file order.
    Empty cells become NaN with missing_mask set.

    Raises:
        ParseError: malformed cells or rows, with row/column coordinates.
        IntegrityError: duplicate sample ids.
        TaskError: fewer than two classes.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if not first.strip():
            raise ParseError(f"{path}: empty file or blank header")
        delim = delimiter or _sniff_delimiter(first)
        header = next(csv.reader([first], delimiter=delim))
        header = [h.strip() for h in header]
        if len(header) < 3:
            raise ParseError(
                f"{path}: header needs id, label, and at least one feature column"
            )
        try:
            label_pos = header.index(label_column, 1)
        except ValueError:
            raise ParseError(
                f"{path}: label column {label_column!r} not found in header"
            ) from None
        feature_pos = [
            j for j in range(1, len(header)) if j != label_pos
        ]
        feature_names = [header[j] for j in feature_pos]

        sample_ids = []
        labels = []
        rows = []
        mask_rows = []
        any_missing = False
        reader = csv.reader(fh, delimiter=delim)
        for lineno, cells in enumerate(reader, start=2):
            if not cells or (len(cells) == 1 and not cells[0].strip()):
                continue  # skip trailing blank lines
            if len(cells) != len(header):
                raise ParseError(
                    f"{path}: row {lineno} has {len(cells)} cells, expected {len(header)}"
                )
            sid = cells[0].strip()
            if not sid:
                raise ParseError(f"{path}: row {lineno} has an empty sample id")
            label = cells[label_pos].strip()
            if not label:
                raise ParseError(f"{path}: row {lineno} has an empty label")
            values = np.empty(len(feature_pos), dtype=np.float64)
            miss = np.zeros(len(feature_pos), dtype=bool)
            for k, j in enumerate(feature_pos):
                cell = cells[j].strip()
                if cell == "":
                    values[k] = np.nan
                    miss[k] = True
                    any_missing = True
                    continue
                try:
                    values[k] = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: row {lineno} column {header[j]!r}: "
                        f"cannot parse {cell!r} as a number"
                    ) from None
            sample_ids.append(sid)
            labels.append(label)
            rows.append(values)
            mask_rows.append(miss)

    if not rows:
        raise ParseError(f"{path}: no data rows")
    if len(set(sample_ids)) != len(sample_ids):
        seen, dup = set(), None
        for s in sample_ids:
            if s in seen:
                dup = s
                break
            seen.add(s)
        raise IntegrityError(f"{path}: duplicate sample id {dup!r}")

    class_names = []
    class_index = {}
    y = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        if lab not in class_index:
            class_index[lab] = len(class_names)
            class_names.append(lab)
        y[i] = class_index[lab]
    if len(class_names) < 2:
        raise TaskError(
            f"{path}: classification needs at least two classes, found {len(class_names)}"
        )

    return TabularDataset(
        sample_ids=sample_ids,
        X=np.vstack(rows),
        y=y,
        feature_names=feature_names,
        class_names=class_names,
        missing_mask=np.vstack(mask_rows) if any_missing else None,
    )


def join_modalities(a: TabularDataset, b: TabularDataset) -> tuple:
    """Align two modalities on sample id; unmatched samples are dropped.

    Returns the two datasets restricted to the shared ids, in modality-A
    order. Labels must agree for every shared id.
    """
    pos_b = {sid: i for i, sid in enumerate(b.sample_ids)}
    keep_a, keep_b = [], []
    for i, sid in enumerate(a.sample_ids):
        j = pos_b.get(sid)
        if j is None:
            continue
        if a.class_names[a.y[i]] != b.class_names[b.y[j]]:
            raise IntegrityError(
                f"sample {sid!r} has conflicting labels across modalities"
            )
        keep_a.append(i)
        keep_b.append(j)
    dropped = (a.n_samples - len(keep_a)) + (b.n_samples - len(keep_b))
    if dropped:
        log.info("join_modalities: dropped %d unmatched samples", dropped)
    a2, b2 = a.take(keep_a), b.take(keep_b)
    # re-index modality B onto A's class order so y arrays agree
    if b2.class_names != a2.class_names:
        remap = {name: k for k, name in enumerate(a2.class_names)}
        b2 = TabularDataset(
            sample_ids=b2.sample_ids,
            X=b2.X,
            y=np.array([remap[b2.class_names[c]] for c in b2.y], dtype=np.int64),
            feature_names=b2.feature_names,
            class_names=a2.class_names,
            missing_mask=b2.missing_mask,
        )
    return a2, b2


def filter_min_class(ds: TabularDataset, min_count: int = 100) -> TabularDataset:
    """Drop classes with <= min_count samples; re-index densely.

    Class order follows first appearance among the survivors.
    """
    if min_count < 1:
        raise ConfigError(f"min_count must be >= 1, got {min_count}")
    counts = np.bincount(ds.y, minlength=ds.n_classes)
    keep_classes = {c for c in range(ds.n_classes) if counts[c] > min_count}
    if not keep_classes:
        raise TaskError(f"no class has more than {min_count} samples")
    keep_rows = [i for i in range(ds.n_samples) if int(ds.y[i]) in keep_classes]
    sub = ds.take(keep_rows)
    new_names = []
    remap = {}
    new_y = np.empty(len(keep_rows), dtype=np.int64)
    for i, c in enumerate(sub.y):
        c = int(c)
        if c not in remap:
            remap[c] = len(new_names)
            new_names.append(sub.class_names[c])
        new_y[i] = remap[c]
    return TabularDataset(
        sample_ids=sub.sample_ids,
        X=sub.X,
        y=new_y,
        feature_names=sub.feature_names,
        class_names=new_names,
        missing_mask=sub.missing_mask,
    )


def _largest_remainder(counts: np.ndarray, total: int) -> np.ndarray:
    """Apportion `total` across classes proportionally to `counts`.

    Floor the exact quotas, then hand out the remaining units by largest
    fractional part (ties to the lower class index). Never allocates more
    than a class's count.
    """
    counts = np.asarray(counts, dtype=np.int64)
    pool = int(counts.sum())
    if total > pool:
        raise StratificationError(f"cannot allocate {total} from {pool} samples")
    quota = counts * (total / pool) if pool else counts.astype(float)
    base = np.floor(quota).astype(np.int64)
    base = np.minimum(base, counts)
    leftover = total - int(base.sum())
    order = sorted(
        range(len(counts)), key=lambda c: (-(quota[c] - base[c]), c)
    )
    alloc = base.copy()
    i = 0
    while leftover > 0:
        c = order[i % len(order)]
        if alloc[c] < counts[c]:
            alloc[c] += 1
            leftover -= 1
        i += 1
    return alloc


def make_split(
    ds: TabularDataset,
    seed: int,
    test_frac: float = 0.2,
    val_frac_of_remainder: float = 0.1,
    label_fraction: float = 1.0,
) -> SplitPlan:
    """Stratified test / train / val split plus a labelled subsample.

    Largest-remainder rounding keeps every class's share within one
    sample of proportional in each partition. The labelled subset holds
    round(label_fraction * |train|) samples, with at least one per class.

    Raises:
        StratificationError: some class cannot appear in every partition.
    """
    for name, v in (("test_frac", test_frac), ("val_frac_of_remainder", val_frac_of_remainder)):
        if not 0.0 < v < 1.0:
            raise ConfigError(f"{name} must be in (0,1), got {v}")
    if not 0.0 < label_fraction <= 1.0:
        raise ConfigError(f"label_fraction must be in (0,1], got {label_fraction}")

    rng = Rng(seed).stream("split")
    n = ds.n_samples
    n_classes = ds.n_classes
    pools = []
    for c in range(n_classes):
        idx = np.flatnonzero(ds.y == c)
        rng.shuffle(idx)
        pools.append(list(idx))
    counts = np.array([len(p) for p in pools], dtype=np.int64)

    test_quota = _largest_remainder(counts, int(round(test_frac * n)))
    remainder_counts = counts - test_quota
    n_remainder = int(remainder_counts.sum())
    val_quota = _largest_remainder(
        remainder_counts, int(round(val_frac_of_remainder * n_remainder))
    )
    train_quota = remainder_counts - val_quota

    for c in range(n_classes):
        for part, quota in (("test", test_quota), ("val", val_quota), ("train", train_quota)):
            if quota[c] < 1:
                raise StratificationError(
                    f"class {ds.class_names[c]!r} has no samples in the {part} split "
                    f"({counts[c]} total); dataset too small for stratification"
                )

    test_idx, val_idx, train_idx = [], [], []
    train_pools = []
    for c in range(n_classes):
        p = pools[c]
        t_end = int(test_quota[c])
        v_end = t_end + int(val_quota[c])
        test_idx.extend(p[:t_end])
        val_idx.extend(p[t_end:v_end])
        train_pools.append(p[v_end:])
        train_idx.extend(p[v_end:])

    train_counts = np.array([len(p) for p in train_pools], dtype=np.int64)
    if label_fraction == 1.0:
        labelled_idx = sorted(train_idx)
    else:
        target = int(round(label_fraction * len(train_idx)))
        lab_quota = _largest_remainder(train_counts, min(target, len(train_idx)))
        lab_quota = np.maximum(lab_quota, 1)  # never drop a class from the labelled set
        labelled_idx = []
        for c in range(n_classes):
            labelled_idx.extend(train_pools[c][: int(lab_quota[c])])
        labelled_idx = sorted(labelled_idx)

    return SplitPlan(
        test_idx=np.array(sorted(test_idx), dtype=np.intp),
        train_idx=np.array(sorted(train_idx), dtype=np.intp),
        val_idx=np.array(sorted(val_idx), dtype=np.intp),
        labelled_idx=np.array(labelled_idx, dtype=np.intp),
        seed=seed,
        label_fraction=label_fraction,
    )


def make_unmatched_split(ds: TabularDataset, plan: SplitPlan) -> SplitPlan:
    """Split the unlabelled training rows 50:50 into Set 1 / Set 2.

    Stratified per class with largest-remainder rounding; the two sets
    partition the unlabelled pool exactly.
    """
    unlabelled = np.setdiff1d(plan.train_idx, plan.labelled_idx)
    rng = Rng(plan.seed).stream("unmatched")
    pools = []
    classes = sorted(set(int(ds.y[i]) for i in unlabelled))
    for c in classes:
        idx = np.array([i for i in unlabelled if ds.y[i] == c], dtype=np.intp)
        rng.shuffle(idx)
        pools.append(idx)
    counts = np.array([len(p) for p in pools], dtype=np.int64)
    quota1 = _largest_remainder(counts, int(counts.sum()) // 2)
    set1, set2 = [], []
    for p, q in zip(pools, quota1):
        set1.extend(p[: int(q)])
        set2.extend(p[int(q):])
    return replace(
        plan,
        set1_idx=np.array(sorted(set1), dtype=np.intp),
        set2_idx=np.array(sorted(set2), dtype=np.intp),
    )


@dataclass(frozen=True)
class Standardizer:
    """Train-fitted per-column center/scale; frozen after fit."""

    mean: np.ndarray
    scale: np.ndarray
    n_fit: int

    def apply(self, X: np.ndarray) -> np.ndarray:
        return standardize_apply(X, self.mean, self.scale)


def standardize_fit(X_train: np.ndarray) -> Standardizer:
    """Fit per-column mean and population standard deviation.

    Columns with scale below 1e-12 pass through centered only.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    mean = X_train.mean(axis=0)
    scale = X_train.std(axis=0)  # population (ddof=0)
    scale = np.where(scale < 1e-12, 1.0, scale)
    return Standardizer(mean=mean, scale=scale, n_fit=X_train.shape[0])


def standardize_apply(X: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != mean.shape[0]:
        raise ShapeError(
            f"standardize_apply: {X.shape[1]} columns vs {mean.shape[0]} fitted"
        )
    return (X - mean) / scale


@dataclass(frozen=True)
class PcaModel:
    """Train-fitted PCA basis with orthonormal components [d x k]."""

    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[1]


def pca_fit(X_train: np.ndarray, k: int = 200) -> PcaModel:
    """Fit PCA on (already standardized) training rows via SVD.

    Components are the top-k right singular vectors of the centered
    training matrix, each sign-fixed so its largest-magnitude entry is
    positive. k larger than min(n, d) is clamped with a warning.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    n, d = X_train.shape
    if k < 1:
        raise ConfigError(f"pca k must be >= 1, got {k}")
    limit = min(n, d)
    if k > limit:
        log.warning("pca_fit: k=%d clamped to min(n, d)=%d", k, limit)
        k = limit
    mean = X_train.mean(axis=0)
    centered = X_train - mean
    try:
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"SVD failed to converge on a {n}x{d} matrix "
            f"(max |value| {np.abs(centered).max():.3e})"
        ) from exc
    components = vt[:k].T.copy()
    for j in range(k):
        i_star = int(np.argmax(np.abs(components[:, j])))
        if components[i_star, j] < 0:
            components[:, j] = -components[:, j]
    explained = (s[:k] ** 2) / n
    return PcaModel(
        mean=mean,
        scale=np.ones(d),
        components=components,
        explained_variance=explained,
    )


def pca_transform(X: np.ndarray, model: PcaModel) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != model.components.shape[0]:
        raise ShapeError(
            f"pca_transform: {X.shape[1]} columns vs {model.components.shape[0]} fitted"
        )
    return ((X - model.mean) / model.scale) @ model.components


@dataclass(frozen=True)
class MissingnessConfig:
    """Two-stage Bernoulli missingness: sample-level p_I, feature-level p_M."""

    p_incomplete: float
    p_missing: float
    seed: int = 0

    def __post_init__(self):
        for name, v in (("p_incomplete", self.p_incomplete), ("p_missing", self.p_missing)):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0,1], got {v}")


def synthesize_missing(X_test: np.ndarray, cfg: MissingnessConfig) -> tuple:
    """Mask test cells: rows incomplete w.p. p_I, then cells w.p. p_M.

    Returns (X', mask) where masked cells of X' are NaN; the input is not
    mutated, so originals remain available for audit. Identical (seed,
    cfg) yields an identical mask.
    """
    X_test = np.asarray(X_test, dtype=np.float64)
    rng = Rng(cfg.seed).stream("mask")
    n, d = X_test.shape
    incomplete = rng.random(n) < cfg.p_incomplete
    cell = rng.random((n, d)) < cfg.p_missing
    mask = incomplete[:, None] & cell
    X_out = X_test.copy()
    X_out[mask] = np.nan
    return X_out, mask


@dataclass(frozen=True)
class ImputeStats:
    """Per-feature training statistics available to imputation."""

    mean: np.ndarray
    minimum: np.ndarray
    n_fit: int


def fit_impute_stats(X_train: np.ndarray) -> ImputeStats:
    X_train = np.asarray(X_train, dtype=np.float64)
    return ImputeStats(
        mean=X_train.mean(axis=0),
        minimum=X_train.min(axis=0),
        n_fit=X_train.shape[0],
    )


IMPUTE_STRATEGIES = ("mean", "minimum", "mask_token_passthrough")


def impute(X: np.ndarray, mask: np.ndarray | None, strategy: str, train_stats: ImputeStats) -> np.ndarray:
    """Fill masked cells from training statistics.

    `mean` and `minimum` substitute the per-feature training statistic.
    `mask_token_passthrough` writes a neutral 0.0 so the matrix is fully
    numeric; the caller forwards the mask to the model layer, which swaps
    in the learned mask token after tokenization (the 0.0 never survives).
    """
    X = np.asarray(X, dtype=np.float64)
    if strategy not in IMPUTE_STRATEGIES:
        raise ConfigError(
            f"unknown imputation strategy {strategy!r}; known: {IMPUTE_STRATEGIES}"
        )
    out = X.copy()
    if mask is None or not np.any(mask):
        return out
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != X.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match X {X.shape}")
    if strategy == "mean":
        fill = np.broadcast_to(train_stats.mean, X.shape)
    elif strategy == "minimum":
        fill = np.broadcast_to(train_stats.minimum, X.shape)
    else:
        fill = np.zeros_like(X)
    out[mask] = fill[mask]
    return out

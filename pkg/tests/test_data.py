import numpy as np
import pytest

from tabssl.data import (
    MissingnessConfig,
    TabularDataset,
    filter_min_class,
    fit_impute_stats,
    impute,
    join_modalities,
    load_table,
    make_split,
    make_unmatched_split,
    pca_fit,
    pca_transform,
    standardize_fit,
    synthesize_missing,
)
from tabssl.errors import (
    ConfigError,
    IntegrityError,
    ParseError,
    StratificationError,
    TaskError,
)


def make_ds(y, n_features=3, seed=0):
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    rng = np.random.default_rng(seed)
    classes = [f"c{c}" for c in range(int(y.max()) + 1)]
    return TabularDataset(
        sample_ids=np.array([f"s{i}" for i in range(n)]),
        X=rng.normal(size=(n, n_features)),
        y=y,
        feature_names=[f"f{j}" for j in range(n_features)],
        class_names=classes,
        missing_mask=np.zeros((n, n_features), dtype=bool),
    )


# -- load_table ---------------------------------------------------------------


def test_load_table_basic(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,label,g1,g2\nr1,A,1.0,2.0\nr2,B,3.0,4.0\nr3,A,5.0,6.0\n")
    ds = load_table(p)
    assert ds.n_classes == 2
    assert list(ds.y) == [0, 1, 0]
    assert ds.class_names == ["A", "B"]
    assert ds.X.shape == (3, 2)


def test_load_table_empty_cell_becomes_mask(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,label,g1,g2\nr1,A,1.0,2.0\nr2,B,3.0,4.0\nr3,A,,6.0\n")
    ds = load_table(p)
    assert ds.missing_mask[2, 0]
    assert np.isnan(ds.X[2, 0])
    assert ds.missing_mask.sum() == 1


def test_load_table_tab_delimited(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("id\tlabel\tg1\nr1\tA\t1.0\nr2\tB\t2.0\n")
    assert load_table(p).n_features == 1


def test_load_table_bad_number(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,label,g1\nr1,A,1.0\nr2,B,oops\n")
    with pytest.raises(ParseError):
        load_table(p)


def test_load_table_duplicate_ids(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,label,g1\nr1,A,1.0\nr1,B,2.0\n")
    with pytest.raises(IntegrityError):
        load_table(p)


def test_load_table_single_class(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,label,g1\nr1,A,1.0\nr2,A,2.0\n")
    with pytest.raises(TaskError):
        load_table(p)


# -- join_modalities -----------------------------------------------------------


def _write(path, rows):
    path.write_text("id,label,g1\n" + "\n".join(rows) + "\n")


def test_join_keeps_intersection(tmp_path, caplog):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _write(a, ["r1,A,1.0", "r2,B,2.0", "r3,A,3.0"])
    _write(b, ["r3,A,30.0", "r1,A,10.0", "r4,B,40.0"])
    with caplog.at_level("INFO"):
        ja, jb = join_modalities(load_table(a), load_table(b))
    assert list(ja.sample_ids) == ["r1", "r3"]
    assert list(jb.sample_ids) == ["r1", "r3"]
    assert jb.X[0, 0] == 10.0  # reordered to match A
    assert any("dropped" in r.message for r in caplog.records)


def test_join_conflicting_labels(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    _write(a, ["r1,A,1.0", "r2,B,2.0"])
    _write(b, ["r1,B,1.0", "r2,A,2.0"])
    with pytest.raises(IntegrityError):
        join_modalities(load_table(a), load_table(b))


# -- filter_min_class ------------------------------------------------------------


def test_filter_keeps_majority_class():
    ds = make_ds([0] * 200 + [1] * 50)
    out = filter_min_class(ds, 100)
    assert out.n_classes == 1 or len(set(out.y.tolist())) == 1
    assert out.n_samples == 200


def test_filter_identity_when_all_large():
    ds = make_ds([0] * 120 + [1] * 110)
    out = filter_min_class(ds, 100)
    assert out.n_samples == 230


def test_filter_strict_inequality():
    sizes = [150, 120, 101, 100, 99]
    y = np.concatenate([[c] * s for c, s in enumerate(sizes)])
    out = filter_min_class(make_ds(y), 100)
    assert len(set(out.y.tolist())) == 3  # 100 is not > 100
    assert out.n_samples == 150 + 120 + 101


# -- make_split -------------------------------------------------------------------


def test_split_exact_proportions():
    ds = make_ds([0] * 60 + [1] * 40)
    plan = make_split(ds, seed=0)
    test_y = ds.y[plan.test_idx]
    assert len(plan.test_idx) == 20
    assert (test_y == 0).sum() == 12 and (test_y == 1).sum() == 8


def test_split_full_label_fraction():
    ds = make_ds([0] * 60 + [1] * 40)
    plan = make_split(ds, seed=0, label_fraction=1.0)
    assert np.array_equal(plan.labelled_idx, plan.train_idx)


def test_split_min_one_labelled_per_class():
    ds = make_ds(np.repeat(np.arange(10), 100))
    plan = make_split(ds, seed=3, label_fraction=0.01)
    lab_y = ds.y[plan.labelled_idx]
    assert len(plan.labelled_idx) == 10
    assert set(lab_y.tolist()) == set(range(10))


def test_split_parts_are_disjoint_and_cover():
    ds = make_ds(np.repeat(np.arange(3), 40))
    plan = make_split(ds, seed=1)
    parts = [plan.test_idx, plan.val_idx, plan.train_idx]
    union = np.concatenate(parts)
    assert len(union) == ds.n_samples == len(set(union.tolist()))


def test_split_stratification_bound():
    # every split's class proportion within 1/|split| of the global one
    y = np.repeat(np.arange(4), [37, 61, 23, 79])
    ds = make_ds(y)
    plan = make_split(ds, seed=5)
    global_prop = np.bincount(y, minlength=4) / len(y)
    for idx in (plan.test_idx, plan.val_idx, plan.train_idx):
        prop = np.bincount(ds.y[idx], minlength=4) / len(idx)
        assert np.all(np.abs(prop - global_prop) <= 1.0 / len(idx) + 1e-12)


def test_split_seed_determinism():
    ds = make_ds(np.repeat(np.arange(3), 50))
    p1 = make_split(ds, seed=9)
    p2 = make_split(ds, seed=9)
    assert np.array_equal(p1.test_idx, p2.test_idx)
    assert np.array_equal(p1.labelled_idx, p2.labelled_idx)
    p3 = make_split(ds, seed=10)
    assert not np.array_equal(p1.test_idx, p3.test_idx)


def test_split_rare_class_fails_loudly():
    ds = make_ds([0] * 99 + [1])  # one sample of class 1 cannot reach every part
    with pytest.raises(StratificationError):
        make_split(ds, seed=0)


# -- make_unmatched_split -----------------------------------------------------------


def test_unmatched_halves_stratified():
    from tabssl.data import SplitPlan

    ds = make_ds([0] * 50 + [1] * 50)
    empty = np.array([], dtype=np.int64)
    plan = SplitPlan(test_idx=empty, val_idx=empty,
                     train_idx=np.arange(100), labelled_idx=empty,
                     seed=2, label_fraction=0.0)
    plan = make_unmatched_split(ds, plan)
    y1 = ds.y[plan.set1_idx]
    assert len(plan.set1_idx) == 50
    assert (y1 == 0).sum() == 25 and (y1 == 1).sum() == 25


def test_unmatched_partition():
    ds = make_ds(np.repeat(np.arange(3), 60))
    plan = make_unmatched_split(ds, make_split(ds, seed=4))
    s1, s2 = set(plan.set1_idx.tolist()), set(plan.set2_idx.tolist())
    unlabelled = set(plan.train_idx.tolist()) - set(plan.labelled_idx.tolist())
    assert s1.isdisjoint(s2)
    assert s1 | s2 == unlabelled
    for c in range(3):
        n1 = (ds.y[plan.set1_idx] == c).sum()
        n2 = (ds.y[plan.set2_idx] == c).sum()
        assert abs(int(n1) - int(n2)) <= 1


# -- standardize ---------------------------------------------------------------------


def test_standardize_closed_form():
    X = np.array([[1.0], [2.0], [3.0]])
    std = standardize_fit(X)
    out = std.apply(X)
    assert np.allclose(out[:, 0], [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_standardize_constant_column():
    X = np.full((5, 1), 7.0)
    out = standardize_fit(X).apply(X)
    assert np.array_equal(out, np.zeros((5, 1)))


def test_standardize_never_refits():
    X = np.array([[1.0], [2.0], [3.0]])
    std = standardize_fit(X)
    mean_before = std.mean.copy()
    std.apply(np.array([[100.0], [200.0], [300.0]]))
    assert np.array_equal(std.mean, mean_before)


def test_leakage_sentinel():
    rng = np.random.default_rng(0)
    train = rng.normal(size=(50, 4))
    test = rng.normal(loc=3.0, size=(20, 4))
    train_only = standardize_fit(train)
    both = standardize_fit(np.vstack([train, test]))
    assert not np.allclose(train_only.mean, both.mean)


# -- PCA ---------------------------------------------------------------------------


def test_pca_rank_one_geometry():
    t = np.linspace(-2, 2, 40)
    X = np.stack([t, t], axis=1)  # points on the line y=x
    model = pca_fit(X, 2)
    first = model.components[:, 0]
    assert np.allclose(np.abs(first), [1 / np.sqrt(2)] * 2, atol=1e-9)
    assert model.explained_variance[1] == pytest.approx(0.0, abs=1e-12)


def test_pca_full_rank_reconstruction():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 6))
    model = pca_fit(X, 6)
    Z = pca_transform(X, model)
    back = Z @ model.components.T + model.mean
    assert np.abs(back - X).max() < 1e-8


def test_pca_orthonormal_components():
    rng = np.random.default_rng(2)
    model = pca_fit(rng.normal(size=(50, 10)), 10)
    gram = model.components.T @ model.components
    assert np.abs(gram - np.eye(10)).max() < 1e-8


def test_pca_explained_variance_matches_eigertdecomposition():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 10))
    model = pca_fit(X, 10)
    centered = X - X.mean(axis=0)
    eig = np.sort(np.linalg.eigvalsh(centered.T @ centered / len(X)))[::-1]
    rel = np.abs(model.explained_variance - eig) / np.maximum(np.abs(eig), 1e-30)
    assert rel.max() < 1e-8


def test_pca_transform_of_mean_is_zero():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(20, 5))
    model = pca_fit(X, 3)
    z = pca_transform(X.mean(axis=0, keepdims=True), model)
    assert np.abs(z).max() < 1e-8


def test_pca_clamps_k_with_warning(caplog):
    rng = np.random.default_rng(5)
    with caplog.at_level("WARNING"):
        model = pca_fit(rng.normal(size=(8, 4)), 10)
    assert model.components.shape[1] <= 8
    assert any("clamp" in r.message.lower() for r in caplog.records)


# -- missingness ---------------------------------------------------------------------


def test_missingness_p_zero():
    X = np.ones((20, 5))
    _, mask = synthesize_missing(X, MissingnessConfig(0.0, 0.9, seed=0))
    assert not mask.any()


def test_missingness_all_masked():
    X = np.ones((20, 5))
    Xm, mask = synthesize_missing(X, MissingnessConfig(1.0, 1.0, seed=0))
    assert mask.all()
    assert np.isnan(Xm).all()


def test_missingness_monte_carlo():
    X = np.zeros((1000, 100))
    _, mask = synthesize_missing(X, MissingnessConfig(0.5, 0.5, seed=1))
    assert abs(mask.mean() - 0.25) < 0.01


def test_missingness_reproducible_and_pure():
    X = np.arange(50, dtype=np.float64).reshape(10, 5)
    X0 = X.copy()
    cfg = MissingnessConfig(0.5, 0.5, seed=2)
    X1, m1 = synthesize_missing(X, cfg)
    X2, m2 = synthesize_missing(X, cfg)
    assert np.array_equal(m1, m2)
    assert np.array_equal(X, X0)  # input untouched


def test_missingness_validates_probs():
    with pytest.raises(ConfigError):
        MissingnessConfig(1.5, 0.5, seed=0)


# -- impute --------------------------------------------------------------------------


def test_impute_empty_mask_identity():
    X = np.arange(6, dtype=np.float64).reshape(3, 2)
    stats = fit_impute_stats(X)
    mask = np.zeros((3, 2), dtype=bool)
    for strategy in ("mean", "minimum", "mask_token_passthrough"):
        assert np.array_equal(impute(X, mask, strategy, stats), X)


def test_impute_mean_and_minimum():
    train = np.array([[1.0], [2.0], [3.0]])
    stats = fit_impute_stats(train)
    X = np.array([[np.nan]])
    mask = np.array([[True]])
    assert impute(X, mask, "mean", stats)[0, 0] == 2.0
    assert impute(X, mask, "minimum", stats)[0, 0] == 1.0
    assert impute(X, mask, "mask_token_passthrough", stats)[0, 0] == 0.0


def test_impute_unknown_strategy():
    stats = fit_impute_stats(np.ones((2, 1)))
    with pytest.raises(ConfigError):
        impute(np.ones((1, 1)), np.ones((1, 1), dtype=bool), "median", stats)

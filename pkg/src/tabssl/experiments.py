"""Config-driven experiment runners mirroring the experiment families.

Each runner takes an ExperimentConfig (usually parsed from a JSON file),
executes one full protocol per seed — split, preprocess, optional
pretrain, finetune, evaluate — and writes stable CSVs:

* results.csv: experiment,model,seed,accuracy,auroc,f1,precision
* aggregate.csv: experiment,model,metric,mean,sd
* long.csv (sweeps): x,y,series,seed

Identical config + seeds reproduce identical bytes in 64-bit mode; floats
are written with repr so values round-trip exactly.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    MissingnessConfig,
    Standardizer,
    TabularDataset,
    fit_impute_stats,
    impute,
    join_modalities,
    load_table,
    make_split,
    make_unmatched_split,
    filter_min_class,
    pca_fit,
    pca_transform,
    standardize_fit,
    synthesize_missing,
)
from .errors import ConfigError, DataError, TaskError
from .metrics import MetricsReport, aggregate_seeds, evaluate
from .model import (
    DuoFTT,
    FTTConfig,
    FTTransformer,
    Mlp,
    MlpConfig,
    extract_arm,
    save_checkpoint,
)
from .rng import Rng
from .training import TrainConfig, finetune, predict_probs, pretrain, pretrain_unmatched
from . import training

log = logging.getLogger(__name__)

EXPERIMENT_KINDS = (
    "unimodal", "mask_rate_sweep", "label_fraction_sweep", "missingness",
    "duo_joint", "duo_clip", "duo_unmatched", "cross_omics", "duo_vs_wide",
    "hpo",
)

_MODEL_KEYS = {
    "token_dim", "n_layers", "n_heads", "ffn_factor", "residual_dropout",
    "attention_dropout", "ffn_dropout", "projection_dims", "mask_rate",
    "temperature",
}
_TRAIN_KEYS = {
    "learning_rate", "weight_decay", "batch_size", "pretrain_epochs",
    "finetune_max_epochs", "patience",
}
_MISSING_KEYS = {"p_incomplete", "p_missing_grid", "train_p_m_grid"}
_HPO_KEYS = {"n_trials", "model_kind", "ranges"}
_TOP_KEYS = {
    "kind", "name", "dataset", "label_column", "pca_components",
    "label_fraction", "label_fractions", "mask_rates", "seeds", "model",
    "train", "missingness", "hpo", "out_dir", "precision", "standardize",
    "min_class_count", "test_frac", "val_frac", "augment_p_m",
}


@dataclass
class ExperimentConfig:
    kind: str
    dataset: list
    out_dir: str
    seeds: list = field(default_factory=lambda: [0])
    name: str = ""
    label_column: str = "label"
    pca_components: int = 0
    label_fraction: float = 0.01
    label_fractions: list | None = None
    mask_rates: list | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    missingness: dict = field(default_factory=dict)
    hpo: dict = field(default_factory=dict)
    precision: str = "f32"
    standardize: bool = True
    min_class_count: int = 0
    test_frac: float = 0.2
    val_frac: float = 0.1
    augment_p_m: float | None = None

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(
                f"unknown experiment kind {self.kind!r}; known: {EXPERIMENT_KINDS}"
            )
        if isinstance(self.dataset, str):
            self.dataset = [self.dataset]
        self.dataset = list(self.dataset)
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        self.seeds = [int(s) for s in self.seeds]
        if self.kind.startswith("duo") or self.kind == "cross_omics":
            if len(self.dataset) != 2:
                raise ConfigError(f"{self.kind} needs exactly two dataset paths")
        elif self.kind != "hpo" and len(self.dataset) != 1:
            raise ConfigError(f"{self.kind} needs exactly one dataset path")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if not self.name:
            self.name = self.kind

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


def _check_keys(d: dict, allowed: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed JSON document.

    Unknown keys anywhere are an error — this catches sweep typos early.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    _check_keys(raw, _TOP_KEYS, "config")
    for sub, keys in (("model", _MODEL_KEYS), ("train", _TRAIN_KEYS),
                      ("missingness", _MISSING_KEYS), ("hpo", _HPO_KEYS)):
        if sub in raw:
            if not isinstance(raw[sub], dict):
                raise ConfigError(f"config key {sub!r} must be an object")
            _check_keys(raw[sub], keys, f"config.{sub}")
    try:
        return ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(raw)


# -- shared pipeline pieces ------------------------------------------------


def _load_dataset(cfg: ExperimentConfig, path) -> TabularDataset:
    if not os.path.exists(path):
        raise ConfigError(f"dataset path does not exist: {path}")
    ds = load_table(path, label_column=cfg.label_column)
    if cfg.min_class_count > 0:
        ds = filter_min_class(ds, cfg.min_class_count)
    return ds


def _ftt_config(cfg: ExperimentConfig, n_features: int, **overrides) -> FTTConfig:
    kwargs = dict(cfg.model)
    kwargs.update(overrides)
    if "projection_dims" in kwargs:
        kwargs["projection_dims"] = tuple(kwargs["projection_dims"])
    return FTTConfig(n_features=n_features, **kwargs)


def _train_config(cfg: ExperimentConfig, seed: int, **overrides) -> TrainConfig:
    kwargs = dict(cfg.train)
    kwargs.update(overrides)
    return TrainConfig(seed=seed, **kwargs)


@dataclass
class _Prepared:
    """Per-seed preprocessed arrays for one modality."""

    X_train: np.ndarray
    X_labelled: np.ndarray
    y_labelled: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    plan: object
    standardizer: Standardizer | None
    pca: object | None
    X_test_raw: np.ndarray  # before standardize/PCA, for missingness synthesis


def _preprocess(cfg: ExperimentConfig, ds: TabularDataset, seed: int,
                label_fraction: float | None = None) -> _Prepared:
    plan = make_split(
        ds, seed, test_frac=cfg.test_frac, val_frac_of_remainder=cfg.val_frac,
        label_fraction=label_fraction if label_fraction is not None else cfg.label_fraction,
    )
    X_train = ds.X[plan.train_idx]
    std = None
    if cfg.standardize:
        std = standardize_fit(X_train)

    def transform(X):
        out = std.apply(X) if std is not None else X
        return out

    pca = None
    X_train_t = transform(X_train)
    if cfg.pca_components > 0:
        pca = pca_fit(X_train_t, cfg.pca_components)
        X_train_t = pca_transform(X_train_t, pca)

    def full(idx):
        out = transform(ds.X[idx])
        if pca is not None:
            out = pca_transform(out, pca)
        return out

    return _Prepared(
        X_train=X_train_t,
        X_labelled=full(plan.labelled_idx),
        y_labelled=ds.y[plan.labelled_idx],
        X_val=full(plan.val_idx),
        y_val=ds.y[plan.val_idx],
        X_test=full(plan.test_idx),
        y_test=ds.y[plan.test_idx],
        plan=plan,
        standardizer=std,
        pca=pca,
        X_test_raw=ds.X[plan.test_idx],
    )


def _evaluate(model, X_test, y_test, seed, forced_mask=None) -> MetricsReport:
    probs = predict_probs(model, X_test, forced_mask=forced_mask)
    return evaluate(y_test, probs, seed=seed)


# -- CSV emission ----------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(path, rows: list):
    """rows: (experiment, model, seed, MetricsReport)."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("experiment,model,seed,accuracy,auroc,f1,precision\n")
        for experiment, model_name, seed, rep in rows:
            r = rep.row()
            fh.write(",".join([
                experiment, model_name, str(seed),
                _fmt(r["accuracy"]), _fmt(r["auroc"]),
                _fmt(r["f1"]), _fmt(r["precision"]),
            ]) + "\n")


def write_aggregate_csv(path, rows: list):
    """Aggregate results rows (same tuples as write_results_csv) per model."""
    groups = {}
    order = []
    for experiment, model_name, _, rep in rows:
        key = (experiment, model_name)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(rep)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("experiment,model,metric,mean,sd\n")
        for key in order:
            agg = aggregate_seeds(groups[key])
            for metric in ("accuracy", "auroc", "f1", "precision"):
                mean, sd = agg[metric]
                fh.write(",".join([key[0], key[1], metric, _fmt(mean), _fmt(sd)]) + "\n")


def write_long_csv(path, rows: list):
    """rows: (x, y, series, seed) — plot-ready sweep points."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,y,series,seed\n")
        for x, y, series, seed in rows:
            fh.write(f"{_fmt(x)},{_fmt(y)},{series},{seed}\n")


# -- experiment runners ----------------------------------------------------


def _run_seeds(cfg, seed_fn, threads: int = 1):
    """Run seed_fn(seed) for every seed, optionally on a thread pool.

    Results are re-ordered by seed so output files never depend on
    completion order.
    """
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(seed_fn, cfg.seeds))
    else:
        results = [seed_fn(s) for s in cfg.seeds]
    return results


def run_unimodal(cfg: ExperimentConfig, threads: int = 1) -> list:
    """Pretrained vs unpretrained FTT on one dataset; returns result rows."""
    ds = _load_dataset(cfg, cfg.dataset[0])

    def one_seed(seed):
        prep = _preprocess(cfg, ds, seed)
        M = prep.X_train.shape[1]
        rows = []
        for variant in ("pretrained", "unpretrained"):
            model = FTTransformer(_ftt_config(cfg, M), Rng(seed), cfg.dtype)
            if variant == "pretrained":
                pretrain(model, prep.X_train, _train_config(cfg, seed), mode="mtr")
            model.attach_classifier(ds.n_classes, Rng(seed))
            finetune(model, prep.X_labelled, prep.y_labelled, prep.X_val,
                     prep.y_val, _train_config(cfg, seed),
                     augment_p_m=cfg.augment_p_m)
            rep = _evaluate(model, prep.X_test, prep.y_test, seed)
            rows.append((cfg.name, f"ftt_{variant}", seed, rep))
        return rows

    results = [r for rows in _run_seeds(cfg, one_seed, threads) for r in rows]
    write_results_csv(os.path.join(cfg.out_dir, "results.csv"), results)
    write_aggregate_csv(os.path.join(cfg.out_dir, "aggregate.csv"), results)
    return results


def run_label_fraction_sweep(cfg: ExperimentConfig, threads: int = 1) -> list:
    """Pretraining benefit across labelled fractions (gap should shrink)."""
    if not cfg.label_fractions:
        raise ConfigError("label_fraction_sweep needs label_fractions")
    ds = _load_dataset(cfg, cfg.dataset[0])

    def one_seed(seed):
        rows = []
        for lf in cfg.label_fractions:
            prep = _preprocess(cfg, ds, seed, label_fraction=lf)
            M = prep.X_train.shape[1]
            for variant in ("pretrained", "unpretrained"):
                model = FTTransformer(_ftt_config(cfg, M), Rng(seed), cfg.dtype)
                if variant == "pretrained":
                    pretrain(model, prep.X_train, _train_config(cfg, seed), mode="mtr")
                model.attach_classifier(ds.n_classes, Rng(seed))
                finetune(model, prep.X_labelled, prep.y_labelled, prep.X_val,
                         prep.y_val, _train_config(cfg, seed))
                rep = _evaluate(model, prep.X_test, prep.y_test, seed)
                rows.append((cfg.name, f"ftt_{variant}_lf={lf}", seed, rep, lf, variant))
        return rows

    results6 = [r for rows in _run_seeds(cfg, one_seed, threads) for r in rows]
    results = [r[:4] for r in results6]
    write_results_csv(os.path.join(cfg.out_dir, "results.csv"), results)
    write_aggregate_csv(os.path.join(cfg.out_dir, "aggregate.csv"), results)
    write_long_csv(
        os.path.join(cfg.out_dir, "long.csv"),
        [(lf, rep.accuracy, f"ftt_{variant}", seed)
         for _, _, seed, rep, lf, variant in results6],
    )
    return results


def run_mask_rate_sweep(cfg: ExperimentConfig, rates: list | None = None,
                        threads: int = 1) -> list:
    """One pretrain+finetune per (mask rate, seed)."""
    rates = list(rates if rates is not None else (cfg.mask_rates or ()))
    if not rates:
        raise ConfigError("mask_rate_sweep needs mask rates")
    for r in rates:
        if not 0.0 <= r <= 1.0:
            raise ConfigError(f"mask rate {r} outside [0,1]")
    ds = _load_dataset(cfg, cfg.dataset[0])

    def one_seed(seed):
        prep = _preprocess(cfg, ds, seed)
        M = prep.X_train.shape[1]
        rows = []
        for rate in rates:
            model = FTTransformer(
                _ftt_config(cfg, M, mask_rate=rate), Rng(seed), cfg.dtype)
            pretrain(model, prep.X_train, _train_config(cfg, seed), mode="mtr")
            model.attach_classifier(ds.n_classes, Rng(seed))
            finetune(model, prep.X_labelled, prep.y_labelled, prep.X_val,
                     prep.y_val, _train_config(cfg, seed))
            rep = _evaluate(model, prep.X_test, prep.y_test, seed)
            rows.append((cfg.name, f"p_m={rate}", seed, rep, rate))
        return rows

    results5 = [r for rows in _run_seeds(cfg, one_seed, threads) for r in rows]
    results = [r[:4] for r in results5]
    write_results_csv(os.path.join(cfg.out_dir, "results.csv"), results)
    write_aggregate_csv(os.path.join(cfg.out_dir, "aggregate.csv"), results)
    write_long_csv(
        os.path.join(cfg.out_dir, "long.csv"),
        [(rate, rep.accuracy, "ftt_mtr", seed) for _, _, seed, rep, rate in results5],
    )
    return results


MISSINGNESS_MODELS = (
    "mean_impute", "minimum_impute", "mtr_mask_token", "pretrained_mtr_mask_token",
)


def run_missingness(cfg: ExperimentConfig, threads: int = 1) -> list:
    """Four-model robustness comparison on synthesized-missing test sets.

    Models: plain FTT with mean imputation; the same trained weights with
    minimum imputation; an MTR-augmented FTT imputing via the mask token;
    an MTR-pretrained FTT (finetuned without augmentation) imputing via
    the mask token. Runs without PCA so features keep their identity.
    """
    if cfg.pca_components != 0:
        raise ConfigError("missingness experiments run without PCA (pca_components=0)")
    miss = dict(cfg.missingness)
    p_incomplete = float(miss.get("p_incomplete", 0.5))
    p_grid = list(miss.get("p_missing_grid", [0.75]))
    train_p_m_grid = miss.get("train_p_m_grid") or []
    ds = _load_dataset(cfg, cfg.dataset[0])

    def one_seed(seed):
        prep = _preprocess(cfg, ds, seed)
        M = prep.X_train.shape[1]
        tc = _train_config(cfg, seed)
        stats = fit_impute_stats(prep.X_train)

        plain = FTTransformer(_ftt_config(cfg, M), Rng(seed), cfg.dtype)
        plain.attach_classifier(ds.n_classes, Rng(seed))
        finetune(plain, prep.X_labelled, prep.y_labelled, prep.X_val, prep.y_val, tc)

        mtr_aug = FTTransformer(_ftt_config(cfg, M), Rng(seed), cfg.dtype)
        mtr_aug.attach_classifier(ds.n_classes, Rng(seed))
        finetune(mtr_aug, prep.X_labelled, prep.y_labelled, prep.X_val, prep.y_val,
                 tc, augment_p_m=mtr_aug.cfg.mask_rate)

        pre_mtr = FTTransformer(_ftt_config(cfg, M), Rng(seed), cfg.dtype)
        pretrain(pre_mtr, prep.X_train, tc, mode="mtr")
        pre_mtr.attach_classifier(ds.n_classes, Rng(seed))
        finetune(pre_mtr, prep.X_labelled, prep.y_labelled, prep.X_val, prep.y_val, tc)

        rows = []
        for p_m_test in p_grid:
            mcfg = MissingnessConfig(p_incomplete=p_incomplete,
                                     p_missing=float(p_m_test), seed=seed)
            # synthesize on the preprocessed (standardized) test matrix
            X_miss, mask = synthesize_missing(prep.X_test, mcfg)
            evals = {
                "mean_impute": (plain, impute(X_miss, mask, "mean", stats), None),
                "minimum_impute": (plain, impute(X_miss, mask, "minimum", stats), None),
                "mtr_mask_token": (
                    mtr_aug, impute(X_miss, mask, "mask_token_passthrough", stats), mask),
                "pretrained_mtr_mask_token": (
                    pre_mtr, impute(X_miss, mask, "mask_token_passthrough", stats), mask),
            }
            for name, (model, X_eval, forced) in evals.items():
                rep = _evaluate(model, X_eval, prep.y_test, seed, forced_mask=forced)
                rows.append((cfg.name, name, seed, rep, float(p_m_test)))

        for p_m_train in train_p_m_grid:
            aug = FTTransformer(_ftt_config(cfg, M, mask_rate=float(p_m_train)),
                                Rng(seed), cfg.dtype)
            aug.attach_classifier(ds.n_classes, Rng(seed))
            finetune(aug, prep.X_labelled, prep.y_labelled, prep.X_val, prep.y_val,
                     tc, augment_p_m=float(p_m_train))
            mcfg = MissingnessConfig(p_incomplete=0.5, p_missing=0.5, seed=seed)
            X_miss, mask = synthesize_missing(prep.X_test, mcfg)
            X_eval = impute(X_miss, mask, "mask_token_passthrough", stats)
            rep = _evaluate(aug, X_eval, prep.y_test, seed, forced_mask=mask)
            rows.append((cfg.name, f"mtr_aug_train_pm={p_m_train}", seed, rep,
                         float(p_m_train)))
        return rows

    results5 = [r for rows in _run_seeds(cfg, one_seed, threads) for r in rows]
    results = [r[:4] for r in results5]
    write_results_csv(os.path.join(cfg.out_dir, "results.csv"), results)
    write_aggregate_csv(os.path.join(cfg.out_dir, "aggregate.csv"), results)
    write_long_csv(
        os.path.join(cfg.out_dir, "long.csv"),
        [(x, rep.accuracy, name, seed) for _, name, seed, rep, x in results5],
    )
    return results


def _prepare_duo(cfg: ExperimentConfig, seed):
    ds_a = _load_dataset(cfg, cfg.dataset[0])
    ds_b = _load_dataset(cfg, cfg.dataset[1])
    ds_a, ds_b = join_modalities(ds_a, ds_b)
    if ds_a.n_classes < 2:
        raise TaskError("joined modalities have fewer than 2 classes")
    if ds_a.n_samples < 10 * ds_a.n_classes:
        raise TaskError(
            f"joined dataset too small: {ds_a.n_samples} samples for "
            f"{ds_a.n_classes} classes (need >= 10 per class)"
        )
    prep_a = _preprocess(cfg, ds_a, seed)
    # modality B reuses A's split plan so rows stay paired
    plan = prep_a.plan
    std_b = standardize_fit(ds_b.X[plan.train_idx]) if cfg.standardize else None

    def tb(X):
        out = std_b.apply(X) if std_b is not None else X
        return out

    pca_b = None
    Xb_train = tb(ds_b.X[plan.train_idx])
    if cfg.pca_components > 0:
        pca_b = pca_fit(Xb_train, cfg.pca_components)
        Xb_train = pca_transform(Xb_train, pca_b)

    def fb(idx):
        out = tb(ds_b.X[idx])
        if pca_b is not None:
            out = pca_transform(out, pca_b)
        return out

    prep_b = _Prepared(
        X_train=Xb_train,
        X_labelled=fb(plan.labelled_idx), y_labelled=ds_b.y[plan.labelled_idx],
        X_val=fb(plan.val_idx), y_val=ds_b.y[plan.val_idx],
        X_test=fb(plan.test_idx), y_test=ds_b.y[plan.test_idx],
        plan=plan, standardizer=std_b, pca=pca_b,
        X_test_raw=ds_b.X[plan.test_idx],
    )
    return ds_a, ds_b, prep_a, prep_b


def _make_duo(cfg, M_a, M_b, seed):
    return DuoFTT(_ftt_config(cfg, M_a), _ftt_config(cfg, M_b), Rng(seed), cfg.dtype)


def _finetune_duo(duo, prep_a, prep_b, cfg, seed, n_classes):
    duo.attach_classifier(n_classes, Rng(seed))
    finetune(
        duo,
        (prep_a.X_labelled, prep_b.X_labelled), prep_a.y_labelled,
        (prep_a.X_val, prep_b.X_val), prep_a.y_val,
        _train_config(cfg, seed),
    )


def run_duo(cfg: ExperimentConfig, mode: str, threads: int = 1) -> list:
    """Bimodal experiment families over a joined two-modality dataset.

    joint: MTR-pretrained DuoFTT vs unpretrained.
    clip: CLIP-pretrained DuoFTT.
    unmatched: per-arm pretraining on disjoint Set 1 / Set 2.
    cross_omics: joint pretrain, then fused finetune and per-arm
        extraction, vs standalone unimodally pretrained FTTs.
    duo_vs_wide: DuoFTT vs one FTT on concatenated features.
    """
    modes = ("joint", "clip", "unmatched", "cross_omics", "duo_vs_wide")
    if mode not in modes:
        raise ConfigError(f"unknown duo mode {mode!r}; known: {modes}")
    if len(cfg.dataset) < 2:
        raise ConfigError(
            f"bimodal experiments need two dataset paths, got {len(cfg.dataset)}"
        )

    def one_seed(seed):
        ds_a, ds_b, prep_a, prep_b = _prepare_duo(cfg, seed)
        M_a = prep_a.X_train.shape[1]
        M_b = prep_b.X_train.shape[1]
        C = ds_a.n_classes
        tc = _train_config(cfg, seed)
        paired_train = (prep_a.X_train, prep_b.X_train)
        rows = []

        def eval_duo(duo, name):
            rep = _evaluate(duo, (prep_a.X_test, prep_b.X_test), prep_a.y_test, seed)
            rows.append((cfg.name, name, seed, rep))

        if mode == "joint":
            duo = _make_duo(cfg, M_a, M_b, seed)
            pretrain(duo, paired_train, tc, mode="mtr")
            _finetune_duo(duo, prep_a, prep_b, cfg, seed, C)
            eval_duo(duo, "duo_mtr_joint")
            bare = _make_duo(cfg, M_a, M_b, seed)
            _finetune_duo(bare, prep_a, prep_b, cfg, seed, C)
            eval_duo(bare, "duo_unpretrained")
        elif mode == "clip":
            duo = _make_duo(cfg, M_a, M_b, seed)
            pretrain(duo, paired_train, tc, mode="clip")
            _finetune_duo(duo, prep_a, prep_b, cfg, seed, C)
            eval_duo(duo, "duo_clip")
        elif mode == "unmatched":
            plan = make_unmatched_split(ds_a, prep_a.plan)
            std_a, std_b = prep_a.standardizer, prep_b.standardizer
            Xa_set1 = std_a.apply(ds_a.X[plan.set1_idx]) if std_a else ds_a.X[plan.set1_idx]
            Xb_set2 = std_b.apply(ds_b.X[plan.set2_idx]) if std_b else ds_b.X[plan.set2_idx]
            if prep_a.pca is not None:
                Xa_set1 = pca_transform(Xa_set1, prep_a.pca)
            if prep_b.pca is not None:
                Xb_set2 = pca_transform(Xb_set2, prep_b.pca)
            duo = _make_duo(cfg, M_a, M_b, seed)
            pretrain_unmatched(duo, Xa_set1, Xb_set2, tc)
            _finetune_duo(duo, prep_a, prep_b, cfg, seed, C)
            eval_duo(duo, "duo_unmatched")
        elif mode == "cross_omics":
            duo = _make_duo(cfg, M_a, M_b, seed)
            pretrain(duo, paired_train, tc, mode="mtr")
            _finetune_duo(duo, prep_a, prep_b, cfg, seed, C)
            eval_duo(duo, "duo_fused")
            for which, prep, M in (("a", prep_a, M_a), ("b", prep_b, M_b)):
                arm = extract_arm(duo, which, n_classes=C, rng=Rng(seed))
                finetune(arm, prep.X_labelled, prep.y_labelled, prep.X_val,
                         prep.y_val, tc)
                rep = _evaluate(arm, prep.X_test, prep.y_test, seed)
                rows.append((cfg.name, f"arm_{which}_from_duo", seed, rep))
            for which, prep, M in (("a", prep_a, M_a), ("b", prep_b, M_b)):
                solo = FTTransformer(_ftt_config(cfg, M), Rng(seed), cfg.dtype)
                pretrain(solo, prep.X_train, tc, mode="mtr")
                solo.attach_classifier(C, Rng(seed))
                finetune(solo, prep.X_labelled, prep.y_labelled, prep.X_val,
                         prep.y_val, tc)
                rep = _evaluate(solo, prep.X_test, prep.y_test, seed)
                rows.append((cfg.name, f"ftt_{which}_unimodal", seed, rep))
        else:  # duo_vs_wide
            duo = _make_duo(cfg, M_a, M_b, seed)
            pretrain(duo, paired_train, tc, mode="mtr")
            _finetune_duo(duo, prep_a, prep_b, cfg, seed, C)
            eval_duo(duo, "duo_mtr_joint")
            wide = FTTransformer(_ftt_config(cfg, M_a + M_b), Rng(seed), cfg.dtype)
            X_wide_train = np.hstack([prep_a.X_train, prep_b.X_train])
            pretrain(wide, X_wide_train, tc, mode="mtr")
            wide.attach_classifier(C, Rng(seed))
            finetune(
                wide,
                np.hstack([prep_a.X_labelled, prep_b.X_labelled]), prep_a.y_labelled,
                np.hstack([prep_a.X_val, prep_b.X_val]), prep_a.y_val, tc)
            rep = _evaluate(wide, np.hstack([prep_a.X_test, prep_b.X_test]),
                            prep_a.y_test, seed)
            rows.append((cfg.name, "ftt_wide", seed, rep))
        return rows

    results = [r for rows in _run_seeds(cfg, one_seed, threads) for r in rows]
    out = os.path.join(cfg.out_dir, "results.csv")
    write_results_csv(out, results)
    write_aggregate_csv(os.path.join(cfg.out_dir, "aggregate.csv"), results)
    return results


# -- HPO --------------------------------------------------------------------

FTT_HPO_RANGES = {
    "n_layers": (1, 4),
    "token_dim": (64, 512),
    "residual_dropout": (0.0, 0.2),
    "attention_dropout": (0.0, 0.5),
    "ffn_dropout": (0.0, 0.5),
    "ffn_factor": (2 / 3, 8 / 3),
    "learning_rate": (1e-5, 1e-3),
    "weight_decay": (1e-6, 1e-3),
}
MLP_HPO_RANGES = {
    "n_layers": (3, 6),
    "layer_size_factor": (0.5, 1.0),
    "epochs": (15, 200),
    "batch_size": (32, 128),
    "learning_rate": (1e-4, 0.5),
}
_LOG_UNIFORM = {"learning_rate", "weight_decay"}
_INT_PARAMS = {"n_layers", "token_dim", "epochs", "batch_size"}


@dataclass
class HpoSpec:
    n_trials: int = 100
    model_kind: str = "ftt"
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigError(f"n_trials must be >= 1, got {self.n_trials}")
        if self.model_kind not in ("ftt", "mlp"):
            raise ConfigError(f"hpo model_kind must be ftt or mlp, got {self.model_kind!r}")
        defaults = FTT_HPO_RANGES if self.model_kind == "ftt" else MLP_HPO_RANGES
        merged = dict(defaults)
        for key, rng in self.ranges.items():
            if key not in defaults:
                raise ConfigError(f"unknown hpo parameter {key!r} for {self.model_kind}")
            lo, hi = float(rng[0]), float(rng[1])
            dlo, dhi = defaults[key]
            if lo < dlo or hi > dhi:
                log.warning(
                    "hpo range for %s [%g, %g] exceeds the reference range [%g, %g]",
                    key, lo, hi, dlo, dhi,
                )
            merged[key] = (lo, hi)
        self.ranges = merged


def sample_trial(spec: HpoSpec, rng) -> dict:
    """Draw one configuration: uniform, log-uniform for rates spanning decades."""
    params = {}
    for key, (lo, hi) in spec.ranges.items():
        if key in _LOG_UNIFORM:
            v = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        else:
            v = rng.uniform(lo, hi)
        if key in _INT_PARAMS:
            v = int(round(v))
        params[key] = v
    if spec.model_kind == "ftt":
        # keep the token dimension compatible with the head count
        heads = 8
        params["token_dim"] = max(heads, int(round(params["token_dim"] / heads)) * heads)
    return params


def run_hpo(cfg: ExperimentConfig, spec: HpoSpec | None = None) -> dict:
    """Random-search HPO; the best trial by validation loss is kept.

    The winning model is not retrained: its early-stopped checkpoint is
    evaluated on test and saved. Emits trials.csv, results.csv, and
    best_config.json.
    """
    if spec is None:
        spec = HpoSpec(**cfg.hpo)
    ds = _load_dataset(cfg, cfg.dataset[0])
    seed = cfg.seeds[0]
    prep = _preprocess(cfg, ds, seed)
    M = prep.X_train.shape[1]
    C = ds.n_classes
    hpo_rng = Rng(seed).stream("hpo")

    trials = []
    best = None
    for trial_i in range(spec.n_trials):
        params = sample_trial(spec, hpo_rng)
        if spec.model_kind == "ftt":
            model_kwargs = {k: v for k, v in params.items()
                            if k not in ("learning_rate", "weight_decay")}
            mcfg = _ftt_config(cfg, M, **model_kwargs)
            model = FTTransformer(mcfg, Rng(seed), cfg.dtype)
            model.attach_classifier(C, Rng(seed))
            tc = _train_config(cfg, seed, learning_rate=params["learning_rate"],
                               weight_decay=params["weight_decay"])
        else:
            mlp_cfg = MlpConfig(
                n_layers=params["n_layers"],
                layer_size_factor=params["layer_size_factor"],
                epochs=params["epochs"],
                batch_size=params["batch_size"],
                learning_rate=params["learning_rate"],
            )
            model = Mlp(mlp_cfg, M, C, Rng(seed), cfg.dtype)
            tc = _train_config(cfg, seed, learning_rate=params["learning_rate"],
                               batch_size=params["batch_size"],
                               finetune_max_epochs=params["epochs"])
        report = finetune(model, prep.X_labelled, prep.y_labelled, prep.X_val,
                          prep.y_val, tc)
        val_loss = report.val_losses[report.best_epoch - 1]
        trials.append((trial_i, params, val_loss))
        if best is None or val_loss < best[2]:
            best = (trial_i, params, val_loss, model)

    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "trials.csv"), "w", encoding="utf-8") as fh:
        keys = sorted(trials[0][1])
        fh.write("trial,val_loss," + ",".join(keys) + "\n")
        for trial_i, params, val_loss in trials:
            fh.write(f"{trial_i},{_fmt(val_loss)},"
                     + ",".join(_fmt(params[k]) for k in keys) + "\n")

    trial_i, params, val_loss, model = best
    rep = _evaluate(model, prep.X_test, prep.y_test, seed)
    rows = [(cfg.name, f"{spec.model_kind}_hpo_best", seed, rep)]
    write_results_csv(os.path.join(cfg.out_dir, "results.csv"), rows)
    write_aggregate_csv(os.path.join(cfg.out_dir, "aggregate.csv"), rows)
    best_payload = {"trial": trial_i, "params": params, "val_loss": val_loss}
    with open(os.path.join(cfg.out_dir, "best_config.json"), "w", encoding="utf-8") as fh:
        json.dump(best_payload, fh, indent=2, sort_keys=True)
    save_checkpoint(model, os.path.join(cfg.out_dir, "best.ckpt"), seed=seed)
    return best_payload


# -- reporting and synthesis -------------------------------------------------


def emit_report(out_dir) -> list:
    """Aggregate every results.csv under out_dir into report files.

    Writes report/summary.csv with mean ± sd per (experiment, model,
    metric), matching aggregate_seeds exactly.
    """
    found = []
    for root, _, files in os.walk(out_dir):
        for fname in files:
            if fname == "results.csv":
                found.append(os.path.join(root, fname))
    if not found:
        raise ConfigError(f"no results.csv files under {out_dir}")
    found.sort()
    rows = []
    for path in found:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            for line in fh:
                cells = line.strip().split(",")
                rec = dict(zip(header, cells))
                rep = MetricsReport(
                    accuracy=float(rec["accuracy"]),
                    macro_auroc=float(rec["auroc"]),
                    macro_f1=float(rec["f1"]),
                    macro_precision=float(rec["precision"]),
                    n_test=0,
                    seed=int(rec["seed"]),
                )
                rows.append((rec["experiment"], rec["model"], int(rec["seed"]), rep))
    report_dir = os.path.join(out_dir, "report")
    os.makedirs(report_dir, exist_ok=True)
    write_aggregate_csv(os.path.join(report_dir, "summary.csv"), rows)
    long_rows = []
    for path in found:
        long_path = os.path.join(os.path.dirname(path), "long.csv")
        if os.path.exists(long_path):
            with open(long_path, encoding="utf-8") as fh:
                fh.readline()
                for line in fh:
                    x, y, series, seed = line.strip().split(",")
                    long_rows.append((float(x), float(y), series, int(seed)))
    if long_rows:
        write_long_csv(os.path.join(report_dir, "sweeps.csv"), long_rows)
    return rows


def make_synthetic(kind: str, n: int, d: int, C: int, noise: float, seed: int,
                   out_dir: str, imbalance: float = 1.0) -> list:
    """Write class-conditional Gaussian blob dataset file(s).

    blobs: one file. bimodal_blobs: two files sharing sample ids and
    labels, with modality-specific class centers and independent noise.
    Class sizes are equal up to largest-remainder rounding; an imbalance
    factor > 1 skews them geometrically.
    """
    if kind not in ("blobs", "bimodal_blobs"):
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    if C < 2:
        raise ConfigError(f"need C >= 2 classes, got {C}")
    if n < 10 * C:
        raise ConfigError(f"need n >= 10*C samples, got n={n}, C={C}")
    if noise < 0:
        raise ConfigError(f"noise must be >= 0, got {noise}")
    rng = Rng(seed).stream("synth")

    weights = np.array([imbalance**c for c in range(C)], dtype=np.float64)
    weights /= weights.sum()
    sizes = np.floor(weights * n).astype(int)
    frac = weights * n - sizes
    for c in np.argsort(-frac)[: n - sizes.sum()]:
        sizes[c] += 1
    y = np.repeat(np.arange(C), sizes)

    ids = [f"S{i:05d}" for i in range(n)]
    labels = [f"class_{c:02d}" for c in y]
    os.makedirs(out_dir, exist_ok=True)

    def write_file(path, X):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            cols = ",".join(f"f{j:04d}" for j in range(X.shape[1]))
            fh.write(f"sample_id,label,{cols}\n")
            for i in range(n):
                vals = ",".join(repr(float(v)) for v in X[i])
                fh.write(f"{ids[i]},{labels[i]},{vals}\n")

    paths = []
    n_modalities = 2 if kind == "bimodal_blobs" else 1
    for m in range(n_modalities):
        centers = rng.normal(size=(C, d))
        X = centers[y] + noise * rng.normal(size=(n, d))
        suffix = f"_mod{'ab'[m]}" if n_modalities == 2 else ""
        path = os.path.join(out_dir, f"{kind}{suffix}.csv")
        write_file(path, X)
        paths.append(path)
    return paths

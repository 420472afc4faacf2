"""Contrastive self-supervised pretraining for tabular data.

A numpy-backed autodiff tensor, an FT-Transformer encoder with mask
token replacement, contrastive objectives with brute-force oracles, and
config-driven experiment runners.
"""

from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    NumericError,
    OracleError,
    ShapeError,
    StateError,
    TabsslError,
)
from .rng import Rng
from .tensor import Tensor, no_grad
from .gradcheck import GradCheckReport, check_gradient
from .objectives import (
    ContrastiveBatch,
    clip_loss,
    cosine_sim,
    cross_entropy,
    ntxent,
    ntxent_bruteforce,
)
from .data import (
    MissingnessConfig,
    SplitPlan,
    TabularDataset,
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
from .metrics import MetricsReport, aggregate_seeds, evaluate
from .model import (
    DuoFTT,
    FTTConfig,
    FTTransformer,
    Mlp,
    MlpConfig,
    extract_arm,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    AdamW,
    TrainConfig,
    TrainReport,
    finetune,
    predict_probs,
    pretrain,
    pretrain_unmatched,
)
from .experiments import ExperimentConfig, load_config, make_synthetic

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "ConfigError",
    "ContrastiveBatch",
    "DataError",
    "DivergenceError",
    "DuoFTT",
    "ExperimentConfig",
    "FTTConfig",
    "FTTransformer",
    "GradCheckReport",
    "MetricsReport",
    "MissingnessConfig",
    "Mlp",
    "MlpConfig",
    "NumericError",
    "OracleError",
    "Rng",
    "ShapeError",
    "SplitPlan",
    "StateError",
    "TabsslError",
    "TabularDataset",
    "Tensor",
    "TrainConfig",
    "TrainReport",
    "aggregate_seeds",
    "check_gradient",
    "clip_loss",
    "cosine_sim",
    "cross_entropy",
    "evaluate",
    "extract_arm",
    "finetune",
    "fit_impute_stats",
    "impute",
    "join_modalities",
    "load_checkpoint",
    "load_config",
    "load_table",
    "make_split",
    "make_synthetic",
    "make_unmatched_split",
    "no_grad",
    "ntxent",
    "ntxent_bruteforce",
    "pca_fit",
    "pca_transform",
    "predict_probs",
    "pretrain",
    "pretrain_unmatched",
    "save_checkpoint",
    "standardize_fit",
    "synthesize_missing",
]

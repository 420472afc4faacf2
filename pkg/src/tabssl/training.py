"""Optimization loops: contrastive pretraining and supervised finetuning.

All randomness derives from TrainConfig.seed through named streams
("batch", "mask", "dropout"), so a (seed, config, data) triple fully
determines the 64-bit loss trajectory. Pretraining runs a fixed number of
epochs (no early stopping); finetuning early-stops on validation
cross-entropy with a patience window and restores the best epoch's
parameters in place.

Progress is emitted on stdout, one line per (epoch, split):
`epoch=<n> phase=<pretrain|finetune> split=<train|val> loss=<float>`.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DivergenceError
from .model import DuoFTT, FTTransformer, Mlp
from .objectives import clip_loss, cross_entropy, ntxent
from .rng import Rng
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 128
    pretrain_epochs: int = 200
    finetune_max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    optimizer: str = "adamw"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.pretrain_epochs < 1 or self.finetune_max_epochs < 1:
            raise ConfigError("epoch counts must be >= 1")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.optimizer != "adamw":
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    wall_time: float = 0.0
    checkpoint: str | None = None


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    Moments are stored per parameter name; bias correction is applied.
    Parameters whose grad is None are skipped entirely (they were not in
    the graph this step).
    """

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        if not self.params:
            raise ConfigError("optimizer needs at least one parameter")
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.state = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in self.params
        }

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        """One update over all parameters with populated gradients."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient in parameter {name!r}")
            m, v = self.state[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update


def _as_model_dtype(data, model):
    dtype = model.dtype
    if isinstance(data, tuple):
        return tuple(np.ascontiguousarray(np.asarray(d), dtype=dtype) for d in data)
    return np.ascontiguousarray(np.asarray(data), dtype=dtype)


def _n_rows(data):
    return data[0].shape[0] if isinstance(data, tuple) else data.shape[0]


def _take(data, idx):
    if isinstance(data, tuple):
        return tuple(d[idx] for d in data)
    return data[idx]


def _batches(n, batch_size, perm, min_batch=1):
    """Index batches over a permutation; a trailing batch smaller than
    min_batch is merged into its predecessor rather than dropped."""
    out = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < min_batch:
        out[-2] = np.concatenate([out[-2], out[-1]])
        out.pop()
    return out


def model_logits(model, xb, training=False, p_m=0.0, mask_rng=None,
                 dropout_rng=None, forced_mask=None) -> Tensor:
    """Dispatch a logits forward across the three model kinds."""
    if isinstance(model, DuoFTT):
        fa, fb = forced_mask if forced_mask is not None else (None, None)
        return model.duo_forward_finetune(
            xb[0], xb[1], training=training, p_m=p_m, mask_rng=mask_rng,
            dropout_rng=dropout_rng, forced_mask_a=fa, forced_mask_b=fb,
        )
    return model.logits(xb, training=training, p_m=p_m, mask_rng=mask_rng,
                        dropout_rng=dropout_rng, forced_mask=forced_mask)


def predict_probs(model, data, batch_size: int = 512, forced_mask=None) -> np.ndarray:
    """Class probabilities over a full dataset, in eval mode, chunked."""
    n = _n_rows(data)
    data = _as_model_dtype(data, model)
    chunks = []
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            fm = None
            if forced_mask is not None:
                if isinstance(forced_mask, tuple):
                    fm = tuple(m[idx] if m is not None else None for m in forced_mask)
                else:
                    fm = forced_mask[idx]
            logits = model_logits(model, _take(data, idx), training=False,
                                  forced_mask=fm)
            chunks.append(T.softmax(logits, axis=-1).data.astype(np.float64))
    return np.vstack(chunks)


def _emit(epoch, phase, split, loss):
    print(f"epoch={epoch} phase={phase} split={split} loss={float(loss)!r}", flush=True)


def pretrain(model, data, cfg: TrainConfig, mode: str = "mtr") -> TrainReport:
    """Contrastive pretraining for a fixed number of epochs.

    mtr: NTXent between clean and masked views (unimodal FTT, or DuoFTT
    with fused projections). clip: bidirectional loss between the two
    arms' projections of the same samples, no masking. The loss is
    normalized per anchor before optimization.
    """
    if mode not in ("mtr", "clip"):
        raise ConfigError(f"unknown pretraining mode {mode!r}")
    is_duo = isinstance(model, DuoFTT)
    if mode == "clip" and not is_duo:
        raise ConfigError("clip pretraining requires a DuoFTT (two modalities)")
    if is_duo and not (isinstance(data, tuple) and len(data) == 2):
        raise ConfigError("a DuoFTT needs paired (X_a, X_b) pretraining data")
    if not is_duo and isinstance(data, tuple):
        raise ConfigError("a unimodal model got tuple data")
    n = _n_rows(data)
    if n < 2:
        raise ConfigError(f"pretraining needs >= 2 rows, got {n}")
    data = _as_model_dtype(data, model)

    arm_cfg = model.arm_a.cfg if is_duo else model.cfg
    p_m = arm_cfg.mask_rate
    tau = arm_cfg.temperature
    if mode == "mtr" and p_m == 0.0:
        log.warning(
            "pretrain: p_m=0 makes every positive pair an exact duplicate; "
            "the contrastive task is degenerate"
        )

    base = Rng(cfg.seed)
    mask_rng = base.stream("mask")
    dropout_rng = base.stream("dropout")
    batch_rng = base.stream("batch")
    opt = AdamW(model.parameters(parts=("backbone", "projection")),
                lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    report = TrainReport()
    start = time.perf_counter()
    for epoch in range(1, cfg.pretrain_epochs + 1):
        perm = batch_rng.permutation(n)
        losses = []
        for step_i, idx in enumerate(_batches(n, cfg.batch_size, perm, min_batch=2)):
            xb = _take(data, idx)
            if is_duo and mode == "mtr":
                z, zt = model.duo_forward_pretrain(
                    xb[0], xb[1], p_m, mask_rng, training=True,
                    dropout_rng=dropout_rng)
                loss = ntxent(z, zt, tau) / len(idx)
            elif mode == "clip":
                za = model.arm_a.project(model.arm_a.embed(
                    xb[0], training=True, dropout_rng=dropout_rng))
                zb = model.arm_b.project(model.arm_b.embed(
                    xb[1], training=True, dropout_rng=dropout_rng))
                loss = clip_loss(za, zb, tau) / len(idx)
            else:
                tokens = model.tokenize(xb)
                masked, _ = model.apply_mtr_mask(tokens, p_m, mask_rng)
                latent_clean, _ = model.encoder_forward(
                    tokens, training=True, rng=dropout_rng)
                latent_masked, _ = model.encoder_forward(
                    masked, training=True, rng=dropout_rng)
                z = model.project(latent_clean)
                zt = model.project(latent_masked)
                loss = ntxent(z, zt, tau) / len(idx)
            if not np.isfinite(loss.data).all():
                raise DivergenceError("pretraining loss is non-finite",
                                      epoch=epoch, step=step_i)
            try:
                backward(loss)
                opt.step()
            except DivergenceError as exc:
                if exc.epoch is None:
                    raise DivergenceError(str(exc), epoch=epoch, step=step_i) from exc
                raise
            opt.zero_grad()
            losses.append(float(loss.data))
        mean_loss = float(np.mean(losses))
        report.train_losses.append(mean_loss)
        _emit(epoch, "pretrain", "train", mean_loss)
    report.best_epoch = cfg.pretrain_epochs
    report.stopped_epoch = cfg.pretrain_epochs
    report.wall_time = time.perf_counter() - start
    return report


def pretrain_unmatched(duo: DuoFTT, data_a, data_b, cfg: TrainConfig) -> TrainReport:
    """MTR-pretrain each arm on its own (disjoint) sample set.

    Equivalent to standalone pretraining of each arm with the same seed;
    both arms end up installed in the duo.
    """
    if not isinstance(duo, DuoFTT):
        raise ConfigError("pretrain_unmatched needs a DuoFTT")
    for name, d in (("Set 1", data_a), ("Set 2", data_b)):
        if d is None or _n_rows(d) == 0:
            raise ConfigError(f"pretrain_unmatched: empty {name}")
    report_a = pretrain(duo.arm_a, data_a, cfg, mode="mtr")
    report_b = pretrain(duo.arm_b, data_b, cfg, mode="mtr")
    return TrainReport(
        train_losses=report_a.train_losses + report_b.train_losses,
        best_epoch=cfg.pretrain_epochs,
        stopped_epoch=cfg.pretrain_epochs,
        wall_time=report_a.wall_time + report_b.wall_time,
    )


def finetune(model, X_lab, y_lab, X_val, y_val, cfg: TrainConfig,
             augment_p_m: float | None = None) -> TrainReport:
    """Supervised finetuning with patience-based early stopping.

    Trains backbone + classification head on labelled rows; evaluates
    validation cross-entropy after each epoch; stops after `patience`
    epochs without improvement and restores the best epoch's parameters
    into the same parameter objects. MTR augmentation (augment_p_m) is
    applied to training batches only, never to validation.
    """
    y_lab = np.asarray(y_lab, dtype=np.int64)
    y_val = np.asarray(y_val, dtype=np.int64)
    n = _n_rows(X_lab)
    if n == 0:
        raise ConfigError("finetune: empty labelled set")
    if y_lab.shape[0] != n:
        raise ConfigError(f"finetune: {n} rows vs {y_lab.shape[0]} labels")
    if augment_p_m is not None and not 0.0 <= augment_p_m <= 1.0:
        raise ConfigError(f"augment_p_m must be in [0,1], got {augment_p_m}")

    if isinstance(model, DuoFTT):
        n_classes = model.arm_a.cfg.n_classes
    elif isinstance(model, FTTransformer):
        if model.classifier is None:
            raise ConfigError("finetune: attach a classification head first")
        n_classes = model.cfg.n_classes
    elif isinstance(model, Mlp):
        n_classes = model.n_classes
    else:
        raise ConfigError(f"cannot finetune a {type(model).__name__}")

    missing_val_classes = sorted(set(range(n_classes)) - set(int(c) for c in y_val))
    if missing_val_classes:
        log.warning("finetune: validation set is missing classes %s", missing_val_classes)

    X_lab = _as_model_dtype(X_lab, model)
    X_val = _as_model_dtype(X_val, model)

    base = Rng(cfg.seed)
    mask_rng = base.stream("mask")
    dropout_rng = base.stream("dropout")
    batch_rng = base.stream("batch")
    if isinstance(model, Mlp):
        params = model.parameters()
    else:
        params = model.parameters(parts=("backbone", "classifier"))
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    report = TrainReport()
    best_val = np.inf
    best_snapshot = None
    bad_epochs = 0
    start = time.perf_counter()
    p_m = augment_p_m if augment_p_m is not None else 0.0

    for epoch in range(1, cfg.finetune_max_epochs + 1):
        perm = batch_rng.permutation(n)
        losses = []
        for step_i, idx in enumerate(_batches(n, cfg.batch_size, perm)):
            logits = model_logits(model, _take(X_lab, idx), training=True,
                                  p_m=p_m, mask_rng=mask_rng,
                                  dropout_rng=dropout_rng)
            loss = cross_entropy(logits, y_lab[idx])
            if not np.isfinite(loss.data).all():
                raise DivergenceError("finetuning loss is non-finite",
                                      epoch=epoch, step=step_i)
            try:
                backward(loss)
                opt.step()
            except DivergenceError as exc:
                if exc.epoch is None:
                    raise DivergenceError(str(exc), epoch=epoch, step=step_i) from exc
                raise
            opt.zero_grad()
            losses.append(float(loss.data))
        train_loss = float(np.mean(losses))
        report.train_losses.append(train_loss)
        _emit(epoch, "finetune", "train", train_loss)

        val_loss = _validation_loss(model, X_val, y_val, cfg.batch_size)
        report.val_losses.append(val_loss)
        _emit(epoch, "finetune", "val", val_loss)

        if val_loss < best_val:
            best_val = val_loss
            report.best_epoch = epoch
            best_snapshot = [(p, p.data.copy()) for _, p in params]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                report.stopped_epoch = epoch
                break
    else:
        report.stopped_epoch = cfg.finetune_max_epochs

    if best_snapshot is not None:
        for p, data in best_snapshot:
            p.data = data
    report.wall_time = time.perf_counter() - start
    return report


def _validation_loss(model, X_val, y_val, batch_size) -> float:
    n = _n_rows(X_val)
    if n == 0:
        raise ConfigError("finetune: empty validation set")
    total = 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            logits = model_logits(model, _take(X_val, idx), training=False)
            ce = cross_entropy(logits, y_val[idx])
            total += float(ce.data) * len(idx)
    return total / n

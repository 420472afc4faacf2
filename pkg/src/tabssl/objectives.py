"""Loss functions for pretraining and finetuning.

Three losses: NTXent over clean/masked projection pairs, the symmetric
bidirectional CLIP loss over two modality latents, and plain cross-entropy.
`ntxent_bruteforce` is a deliberately slow double-loop reference used to
verify the vectorized implementation.

All similarities are cosine; temperatures scale the logits. NTXent and
CLIP return the loss summed over anchors — callers normalize per batch.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

# Additive mask for excluded similarity slots. Large but finite so that
# 0 * mask never produces NaN the way -inf would.
_NEG = 1e30

# Norm floor: rows shorter than this are treated as degenerate (sim = 0).
_NORM_FLOOR = 1e-12


@dataclass
class ContrastiveBatch:
    """One contrastive batch: clean projections, their counterparts, and τ.

    For MTR pretraining `z_tilde` holds the masked-view projections; for
    CLIP it holds the second modality's projections.
    """

    z: Tensor
    z_tilde: Tensor
    temperature: float = 1.0

    def __post_init__(self):
        self.z = self.z if isinstance(self.z, Tensor) else Tensor(self.z)
        self.z_tilde = (
            self.z_tilde if isinstance(self.z_tilde, Tensor) else Tensor(self.z_tilde)
        )
        _validate_pair(self.z, self.z_tilde, self.temperature)

    @property
    def n(self) -> int:
        return self.z.shape[0]


def _validate_pair(z: Tensor, z_tilde: Tensor, temperature: float):
    if z.ndim != 2 or z_tilde.ndim != 2:
        raise ShapeError(
            f"contrastive projections must be 2-d, got {z.shape} and {z_tilde.shape}"
        )
    if z.shape != z_tilde.shape:
        raise ShapeError(
            f"projection shapes differ: {z.shape} vs {z_tilde.shape}"
        )
    if z.shape[0] < 2:
        raise ConfigError(
            f"a contrastive batch needs N >= 2 (one negative), got N={z.shape[0]}"
        )
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if not (np.isfinite(z.data).all() and np.isfinite(z_tilde.data).all()):
        raise NumericError("contrastive batch contains non-finite projections")


def _unpack(batch_or_z, z_tilde, temperature):
    if isinstance(batch_or_z, ContrastiveBatch):
        b = batch_or_z
        return b.z, b.z_tilde, b.temperature
    z = batch_or_z if isinstance(batch_or_z, Tensor) else Tensor(batch_or_z)
    zt = z_tilde if isinstance(z_tilde, Tensor) else Tensor(z_tilde)
    _validate_pair(z, zt, temperature)
    return z, zt, temperature


def _normalize_rows(z: Tensor) -> Tensor:
    """Scale each row to unit norm; zero rows stay zero (degenerate sim 0)."""
    sq = T.tensor_sum(z * z, axis=-1, keepdims=True)
    return z / (T.sqrt(sq) + _NORM_FLOOR)


def cosine_sim(u, v) -> float:
    """Cosine similarity of two vectors as a plain float.

    Degenerate vectors (norm below 1e-12) get similarity 0 with a warning
    rather than a division blow-up. The contrastive losses use their own
    differentiable similarity internally; this is the reference scalar.
    """
    u = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_sim needs equal-length vectors, got {u.shape} and {v.shape}")
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise NumericError("cosine_sim input contains NaN or inf")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu <= _NORM_FLOOR or nv <= _NORM_FLOOR:
        log.warning("cosine_sim: degenerate vector (norm <= %g), returning 0", _NORM_FLOOR)
        return 0.0
    return float(np.dot(u, v) / ((nu + _NORM_FLOOR) * (nv + _NORM_FLOOR)))


def ntxent(batch_or_z, z_tilde=None, temperature: float = 1.0, symmetric: bool = False) -> Tensor:
    """NTXent loss over clean/masked projection pairs, summed over anchors.

    For anchor i the positive is the pair (z_i, z̃_i); the candidate set is
    the positive plus every other sample's clean and masked projection
    (self-similarity excluded):

        L = Σ_i [ LSE_j(candidates_ij / τ) − s(z_i, z̃_i) / τ ]

    With `symmetric=True` a mirrored z̃-anchored term is added (ablation
    option); the default is the single-direction form.
    """
    z, zt, tau = _unpack(batch_or_z, z_tilde, temperature)
    n = z.shape[0]
    zn = _normalize_rows(z)
    ztn = _normalize_rows(zt)

    loss = _ntxent_directed(zn, ztn, tau, n)
    if symmetric:
        loss = loss + _ntxent_directed(ztn, zn, tau, n)
    return loss


def _ntxent_directed(zn: Tensor, ztn: Tensor, tau: float, n: int) -> Tensor:
    s_zz = T.matmul(zn, T.swapaxes(zn, 0, 1)) / tau
    s_zzt = T.matmul(zn, T.swapaxes(ztn, 0, 1)) / tau
    diag_mask = Tensor(np.eye(n, dtype=zn.dtype) * -_NEG)
    logits = T.concat([s_zz + diag_mask, s_zzt], axis=1)  # [n, 2n]
    lse = T.logsumexp(logits, axis=-1)  # [n]
    pos = T.gather_rows(s_zzt, np.arange(n))  # [n]
    return T.tensor_sum(lse - pos)


def ntxent_bruteforce(batch_or_z, z_tilde=None, temperature: float = 1.0) -> float:
    """Double-loop NTXent reference in 64-bit, no vectorized shortcuts.

    Matches `ntxent` within 1e-10 for N <= 64. Uses the same norm-floor
    convention so degenerate rows compare equal.
    """
    z, zt, tau = _unpack(batch_or_z, z_tilde, temperature)
    n = z.shape[0]
    if n > 64:
        raise ConfigError(f"brute-force oracle is O(N^2 p); N={n} exceeds 64")
    zd = np.asarray(z.data, dtype=np.float64)
    ztd = np.asarray(zt.data, dtype=np.float64)

    def norm(row):
        return math.sqrt(sum(float(x) * float(x) for x in row)) + _NORM_FLOOR

    def sim(a, b):
        dot = sum(float(x) * float(y) for x, y in zip(a, b))
        return dot / (norm(a) * norm(b))

    total = 0.0
    for i in range(n):
        pos = sim(zd[i], ztd[i]) / tau
        terms = [pos]
        for k in range(n):
            if k != i:
                terms.append(sim(zd[i], zd[k]) / tau)
        for k in range(n):
            if k != i:
                terms.append(sim(zd[i], ztd[k]) / tau)
        m = max(terms)
        denom = sum(math.exp(t - m) for t in terms)
        # -log( exp(pos - m) / denom )
        total += m + math.log(denom) - pos
    return total


def clip_loss(batch_or_z, z_tilde=None, temperature: float = 1.0) -> Tensor:
    """Bidirectional CLIP loss over two modality projections, summed over anchors.

    Each direction is a softmax cross-entropy over the batch with the
    matching sample as the target; the denominator includes the positive.
    Symmetric in its two arguments.
    """
    u, v, tau = _unpack(batch_or_z, z_tilde, temperature)
    n = u.shape[0]
    un = _normalize_rows(u)
    vn = _normalize_rows(v)
    s_uv = T.matmul(un, T.swapaxes(vn, 0, 1)) / tau  # [n, n]
    idx = np.arange(n)
    pos = T.gather_rows(s_uv, idx)
    lse_u = T.logsumexp(s_uv, axis=-1)
    lse_v = T.logsumexp(T.swapaxes(s_uv, 0, 1), axis=-1)
    return T.tensor_sum(lse_u) + T.tensor_sum(lse_v) - 2.0 * T.tensor_sum(pos)


def cross_entropy(logits, targets) -> Tensor:
    """Mean softmax cross-entropy. Unweighted; log-sum-exp stabilized."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy needs [N, C] logits, got {logits.shape}")
    n, c = logits.shape
    if n == 0:
        raise ConfigError("cross_entropy on an empty batch")
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ShapeError(
            f"targets shape {targets.shape} does not match batch size {n}"
        )
    if not np.issubdtype(targets.dtype, np.integer):
        raise ConfigError(f"targets must be integer class indices, got {targets.dtype}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"target out of range for {c} classes")
    if not np.isfinite(logits.data).all():
        raise NumericError("cross_entropy received non-finite logits")
    lse = T.logsumexp(logits, axis=-1)
    picked = T.gather_rows(logits, targets)
    return T.tensor_mean(lse - picked)

"""FT-Transformer backbone, MTR masking, DuoFTT fusion, MLP baseline.

Each numeric feature gets its own linear tokenizer; a learned class token
is prepended at position 0 and its post-encoder state is the sample
latent. Encoder layers are pre-norm multi-head self-attention + FFN with
residual connections (GELU inside the FFN, ReLU in the heads). There is
no positional encoding: feature identity is carried entirely by the
per-feature tokenizers, so the encoder is permutation-equivariant.

A single learned mask token, shared across features, implements MTR:
masked positions have their tokens replaced by it, both as augmentation
(random Bernoulli masks, redrawn every forward) and as imputation
(forced masks at missing features).
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, ShapeError, StateError
from .rng import Rng
from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class FTTConfig:
    n_features: int
    token_dim: int = 192
    n_layers: int = 3
    n_heads: int = 8
    ffn_factor: float = 4 / 3
    residual_dropout: float = 0.0
    attention_dropout: float = 0.2
    ffn_dropout: float = 0.1
    projection_dims: tuple = (192, 128)
    n_classes: int = 0
    mask_rate: float = 0.45
    temperature: float = 1.0

    def __post_init__(self):
        self.projection_dims = tuple(int(p) for p in self.projection_dims)
        if self.n_features < 1:
            raise ConfigError(f"n_features must be >= 1, got {self.n_features}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.token_dim < 1 or self.n_heads < 1:
            raise ConfigError("token_dim and n_heads must be >= 1")
        if self.token_dim % self.n_heads != 0:
            raise ConfigError(
                f"token_dim {self.token_dim} not divisible by n_heads {self.n_heads}"
            )
        for name in ("residual_dropout", "attention_dropout", "ffn_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0,1), got {v}")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigError(f"mask_rate must be in [0,1], got {self.mask_rate}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not self.projection_dims:
            raise ConfigError("projection_dims must not be empty")

    @property
    def ffn_width(self) -> int:
        return max(1, round(self.token_dim * self.ffn_factor))


def _uniform_param(rng, shape, bound, dtype):
    return Tensor(
        rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True
    )


def _zeros_param(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _ones_param(shape, dtype):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class _Linear:
    def __init__(self, rng, d_in, d_out, dtype):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = _uniform_param(rng, (d_in, d_out), bound, dtype)
        self.bias = _zeros_param((d_out,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias

    def params(self, prefix):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class _LayerNorm:
    def __init__(self, d, dtype):
        self.gain = _ones_param((d,), dtype)
        self.bias = _zeros_param((d,), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def params(self, prefix):
        return [(f"{prefix}.gain", self.gain), (f"{prefix}.bias", self.bias)]


class _EncoderLayer:
    """Pre-norm block: x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, rng, cfg: FTTConfig, dtype):
        d = cfg.token_dim
        self.cfg = cfg
        self.ln1 = _LayerNorm(d, dtype)
        self.wq = _Linear(rng, d, d, dtype)
        self.wk = _Linear(rng, d, d, dtype)
        self.wv = _Linear(rng, d, d, dtype)
        self.wo = _Linear(rng, d, d, dtype)
        self.ln2 = _LayerNorm(d, dtype)
        self.ffn1 = _Linear(rng, d, cfg.ffn_width, dtype)
        self.ffn2 = _Linear(rng, cfg.ffn_width, d, dtype)

    def params(self, prefix):
        out = self.ln1.params(f"{prefix}.ln1")
        for name, lin in (
            ("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo),
        ):
            out += lin.params(f"{prefix}.attn.{name}")
        out += self.ln2.params(f"{prefix}.ln2")
        out += self.ffn1.params(f"{prefix}.ffn1")
        out += self.ffn2.params(f"{prefix}.ffn2")
        return out

    def _attention(self, h: Tensor, training, rng, collect):
        cfg = self.cfg
        b, t, d = h.shape
        n_heads = cfg.n_heads
        dh = d // n_heads

        def split_heads(x):
            return T.swapaxes(x.reshape((b, t, n_heads, dh)), 1, 2)  # [b,H,t,dh]

        q = split_heads(self.wq(h))
        k = split_heads(self.wk(h))
        v = split_heads(self.wv(h))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) / float(np.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        if collect is not None:
            collect.append(attn.data)
        attn = T.dropout(attn, cfg.attention_dropout, rng, training)
        ctx = T.matmul(attn, v)  # [b,H,t,dh]
        merged = T.swapaxes(ctx, 1, 2).reshape((b, t, d))
        return self.wo(merged)

    def __call__(self, x: Tensor, training, rng, collect=None) -> Tensor:
        cfg = self.cfg
        attn_out = self._attention(self.ln1(x), training, rng, collect)
        x = x + T.dropout(attn_out, cfg.residual_dropout, rng, training)
        h = self.ffn2(
            T.dropout(T.gelu(self.ffn1(self.ln2(x))), cfg.ffn_dropout, rng, training)
        )
        return x + T.dropout(h, cfg.residual_dropout, rng, training)


class FTTransformer:
    """Tokenizer + encoder + projection head, with an attachable classifier."""

    def __init__(self, cfg: FTTConfig, rng: Rng, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        init = rng.stream("init") if isinstance(rng, Rng) else rng
        d = cfg.token_dim
        bound = 1.0 / np.sqrt(d)
        self.tokenizer_weight = _uniform_param(init, (cfg.n_features, d), bound, self.dtype)
        self.tokenizer_bias = _uniform_param(init, (cfg.n_features, d), bound, self.dtype)
        self.class_token = _uniform_param(init, (d,), bound, self.dtype)
        self.mask_token = _uniform_param(init, (d,), bound, self.dtype)
        self.layers = [_EncoderLayer(init, cfg, self.dtype) for _ in range(cfg.n_layers)]
        self.final_norm = _LayerNorm(d, self.dtype)
        dims = (d,) + cfg.projection_dims
        self.projection = [
            _Linear(init, dims[i], dims[i + 1], self.dtype) for i in range(len(dims) - 1)
        ]
        self.classifier = None
        if cfg.n_classes >= 2:
            self.attach_classifier(cfg.n_classes, init)

    # -- parameters ------------------------------------------------------

    def parameters(self, parts=("backbone", "projection", "classifier")) -> list:
        """(name, tensor) pairs in creation order, filtered by part."""
        out = []
        if "backbone" in parts:
            out += [
                ("tokenizer.weight", self.tokenizer_weight),
                ("tokenizer.bias", self.tokenizer_bias),
                ("class_token", self.class_token),
                ("mask_token", self.mask_token),
            ]
            for i, layer in enumerate(self.layers):
                out += layer.params(f"layers.{i}")
            out += self.final_norm.params("final_norm")
        if "projection" in parts:
            for j, lin in enumerate(self.projection):
                out += lin.params(f"projection.{j}")
        if "classifier" in parts and self.classifier is not None:
            for j, lin in enumerate(self.classifier):
                out += lin.params(f"classifier.{j}")
        return out

    def attach_classifier(self, n_classes: int, rng):
        """Fresh classification head: token_dim -> hidden dims -> C."""
        if n_classes < 2:
            raise ConfigError(f"classifier needs >= 2 classes, got {n_classes}")
        init = rng.stream("init-classifier") if isinstance(rng, Rng) else rng
        dims = (self.cfg.token_dim,) + self.cfg.projection_dims[:-1] + (n_classes,)
        self.classifier = [
            _Linear(init, dims[i], dims[i + 1], self.dtype) for i in range(len(dims) - 1)
        ]
        self.cfg.n_classes = n_classes

    # -- forward pieces ---------------------------------------------------

    def tokenize(self, x) -> Tensor:
        """Per-feature linear maps: token_f = x_f * W_f + b_f.

        Accepts [M] or [B, M]; returns [M, d] or [B, M, d].
        """
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.shape[-1] != self.cfg.n_features:
            raise ShapeError(
                f"expected {self.cfg.n_features} features, got shape {x.shape}"
            )
        if not np.isfinite(x.data).all():
            raise NumericError(
                "tokenize received non-finite features; impute missing values first"
            )
        expanded = x.reshape(x.shape + (1,))
        return expanded * self.tokenizer_weight + self.tokenizer_bias

    def apply_mtr_mask(self, tokens: Tensor, p_m: float, rng, forced_mask=None):
        """Replace a random token subset with the learned mask token.

        Bernoulli(p_m) positions are redrawn on every call; forced_mask
        positions (test-time missing features) are always replaced.
        Returns (tokens', applied_mask).
        """
        if not 0.0 <= p_m <= 1.0:
            raise ConfigError(f"p_m must be in [0,1], got {p_m}")
        batch_shape = tokens.shape[:-1]  # [..., M]
        if forced_mask is not None:
            forced_mask = np.broadcast_to(np.asarray(forced_mask, dtype=bool), batch_shape)
        if p_m == 0.0:
            if forced_mask is None or not forced_mask.any():
                return tokens, np.zeros(batch_shape, dtype=bool)
            mask = forced_mask.copy()
        else:
            if rng is None:
                raise ConfigError("apply_mtr_mask needs an rng stream when p_m > 0")
            mask = rng.random(batch_shape) < p_m
            if forced_mask is not None:
                mask |= forced_mask
        mf = Tensor(mask[..., None].astype(self.dtype))
        one = Tensor(np.asarray(1.0, dtype=self.dtype))
        return tokens * (one - mf) + self.mask_token * mf, mask

    def encoder_forward(self, tokens: Tensor, training: bool = False, rng=None,
                        return_attention: bool = False):
        """Prepend the class token, run the encoder stack, final-norm.

        Returns (class_latent, all_tokens); with return_attention, also a
        list of per-layer attention weights (debug only).
        """
        unbatched = tokens.ndim == 2
        if unbatched:
            tokens = tokens.reshape((1,) + tokens.shape)
        if tokens.ndim != 3 or tokens.shape[-1] != self.cfg.token_dim:
            raise ShapeError(
                f"encoder_forward expects [B, M, {self.cfg.token_dim}] tokens, "
                f"got {tokens.shape}"
            )
        b = tokens.shape[0]
        ones = Tensor(np.ones((b, 1, 1), dtype=self.dtype))
        cls = ones * self.class_token.reshape((1, 1, self.cfg.token_dim))
        x = T.concat([cls, tokens], axis=1)  # [b, M+1, d]
        attention_maps = [] if return_attention else None
        for i, layer in enumerate(self.layers):
            x = layer(x, training, rng, attention_maps)
            if not np.isfinite(x.data).all():
                raise NumericError(f"non-finite activations after encoder layer {i}")
        x = self.final_norm(x)
        latent = x[:, 0, :]
        if unbatched:
            latent = latent.reshape((self.cfg.token_dim,))
            x = x.reshape(x.shape[1:])
        if return_attention:
            return latent, x, attention_maps
        return latent, x

    def project(self, class_latent: Tensor) -> Tensor:
        """Projection head for contrastive pretraining (not normalized)."""
        z = class_latent
        unbatched = z.ndim == 1
        if unbatched:
            z = z.reshape((1, -1))
        for i, lin in enumerate(self.projection):
            z = lin(z)
            if i < len(self.projection) - 1:
                z = T.relu(z)
        return z.reshape((z.shape[-1],)) if unbatched else z

    def classify(self, class_latent: Tensor) -> Tensor:
        """Classification head; argmax ties break toward the lowest index."""
        if self.classifier is None:
            raise StateError(
                "finetune not initialized: no classification head attached"
            )
        z = class_latent
        unbatched = z.ndim == 1
        if unbatched:
            z = z.reshape((1, -1))
        for i, lin in enumerate(self.classifier):
            z = lin(z)
            if i < len(self.classifier) - 1:
                z = T.relu(z)
        return z.reshape((z.shape[-1],)) if unbatched else z

    # -- convenience ------------------------------------------------------

    def embed(self, x, training=False, p_m=0.0, mask_rng=None, dropout_rng=None,
              forced_mask=None) -> Tensor:
        tokens = self.tokenize(x)
        if p_m > 0.0 or forced_mask is not None:
            tokens, _ = self.apply_mtr_mask(tokens, p_m, mask_rng, forced_mask)
        latent, _ = self.encoder_forward(tokens, training=training, rng=dropout_rng)
        return latent

    def logits(self, x, training=False, p_m=0.0, mask_rng=None, dropout_rng=None,
               forced_mask=None) -> Tensor:
        return self.classify(
            self.embed(x, training, p_m, mask_rng, dropout_rng, forced_mask)
        )


class DuoFTT:
    """Two modality-specific FTTs fused by parameter-free averaging.

    Pretraining fuses projections; finetuning fuses logits. Arms are
    fully independent models.
    """

    def __init__(self, cfg_a: FTTConfig, cfg_b: FTTConfig, rng: Rng, dtype=np.float32):
        if cfg_a.projection_dims[-1] != cfg_b.projection_dims[-1]:
            raise ConfigError(
                "arms must project to the same dimension, got "
                f"{cfg_a.projection_dims[-1]} vs {cfg_b.projection_dims[-1]}"
            )
        self.arm_a = FTTransformer(cfg_a, rng.child("arm_a"), dtype)
        self.arm_b = FTTransformer(cfg_b, rng.child("arm_b"), dtype)
        self.dtype = np.dtype(dtype)

    def parameters(self, parts=("backbone", "projection", "classifier")) -> list:
        return [(f"a.{n}", t) for n, t in self.arm_a.parameters(parts)] + [
            (f"b.{n}", t) for n, t in self.arm_b.parameters(parts)
        ]

    def attach_classifier(self, n_classes: int, rng: Rng):
        self.arm_a.attach_classifier(n_classes, rng.child("head_a"))
        self.arm_b.attach_classifier(n_classes, rng.child("head_b"))

    def _check_inputs(self, x_a, x_b):
        na = np.asarray(x_a.data if isinstance(x_a, Tensor) else x_a)
        nb = np.asarray(x_b.data if isinstance(x_b, Tensor) else x_b)
        if na.shape[:-1] != nb.shape[:-1]:
            raise ShapeError(
                f"modalities must be paired sample-for-sample, got {na.shape} vs {nb.shape}"
            )

    def duo_forward_pretrain(self, x_a, x_b, p_m: float, rng, training=True,
                             dropout_rng=None):
        """Fused clean and masked projections: z = (z_a + z_b) / 2."""
        self._check_inputs(x_a, x_b)
        half = Tensor(np.asarray(0.5, dtype=self.dtype))

        def fused(mask_rate):
            za = self.arm_a.project(self.arm_a.embed(
                x_a, training=training, p_m=mask_rate, mask_rng=rng,
                dropout_rng=dropout_rng))
            zb = self.arm_b.project(self.arm_b.embed(
                x_b, training=training, p_m=mask_rate, mask_rng=rng,
                dropout_rng=dropout_rng))
            return (za + zb) * half

        return fused(0.0), fused(p_m)

    def duo_forward_finetune(self, x_a, x_b, training=False, p_m=0.0, mask_rng=None,
                             dropout_rng=None, forced_mask_a=None, forced_mask_b=None) -> Tensor:
        """Fused logits: (logits_a + logits_b) / 2."""
        if self.arm_a.classifier is None or self.arm_b.classifier is None:
            raise StateError("finetune not initialized: attach classifiers first")
        ca = self.arm_a.cfg.n_classes
        cb = self.arm_b.cfg.n_classes
        if ca != cb:
            raise ConfigError(f"arms disagree on class count: {ca} vs {cb}")
        self._check_inputs(x_a, x_b)
        la = self.arm_a.logits(x_a, training, p_m, mask_rng, dropout_rng, forced_mask_a)
        lb = self.arm_b.logits(x_b, training, p_m, mask_rng, dropout_rng, forced_mask_b)
        half = Tensor(np.asarray(0.5, dtype=self.dtype))
        return (la + lb) * half


def extract_arm(duo: DuoFTT, which: str, n_classes: int | None = None,
                rng: Rng | None = None) -> FTTransformer:
    """Pull one arm out for unimodal finetuning.

    The returned model shares the arm's backbone parameter objects (the
    pretrained weights keep training); when n_classes and rng are given a
    fresh classification head is attached.
    """
    if which not in ("a", "b"):
        raise ConfigError(f"which must be 'a' or 'b', got {which!r}")
    arm = duo.arm_a if which == "a" else duo.arm_b
    if n_classes is not None:
        if rng is None:
            raise ConfigError("extract_arm needs an rng to attach a fresh head")
        arm.attach_classifier(n_classes, rng.child(f"extract_{which}"))
    return arm


@dataclass
class MlpConfig:
    n_layers: int = 3
    layer_size_factor: float = 0.75
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if not 0 < self.layer_size_factor:
            raise ConfigError("layer_size_factor must be positive")


class Mlp:
    """Fully connected ReLU stack; width shrinks by layer_size_factor."""

    def __init__(self, cfg: MlpConfig, n_features: int, n_classes: int, rng: Rng,
                 dtype=np.float32):
        self.cfg = cfg
        self.n_features = n_features
        self.n_classes = n_classes
        self.dtype = np.dtype(dtype)
        init = rng.stream("init") if isinstance(rng, Rng) else rng
        dims = [n_features]
        for _ in range(cfg.n_layers):
            dims.append(max(2, round(dims[-1] * cfg.layer_size_factor)))
        dims.append(n_classes)
        self.linears = [
            _Linear(init, dims[i], dims[i + 1], self.dtype) for i in range(len(dims) - 1)
        ]

    def parameters(self, parts=None) -> list:
        out = []
        for i, lin in enumerate(self.linears):
            out += lin.params(f"mlp.{i}")
        return out

    def logits(self, x, training=False, **_ignored) -> Tensor:
        return mlp_forward(x, self)


def mlp_forward(x, mlp: Mlp) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=mlp.dtype))
    unbatched = x.ndim == 1
    if unbatched:
        x = x.reshape((1, -1))
    if x.shape[-1] != mlp.n_features:
        raise ShapeError(f"expected {mlp.n_features} features, got shape {x.shape}")
    z = x
    for i, lin in enumerate(mlp.linears):
        z = lin(z)
        if i < len(mlp.linears) - 1:
            z = T.relu(z)
    return z.reshape((z.shape[-1],)) if unbatched else z


# -- checkpoints ----------------------------------------------------------


def _config_to_dict(model) -> dict:
    if isinstance(model, DuoFTT):
        return {
            "kind": "duo",
            "a": asdict(model.arm_a.cfg),
            "b": asdict(model.arm_b.cfg),
        }
    if isinstance(model, FTTransformer):
        return {"kind": "ftt", "config": asdict(model.cfg)}
    if isinstance(model, Mlp):
        return {
            "kind": "mlp",
            "config": asdict(model.cfg),
            "n_features": model.n_features,
            "n_classes": model.n_classes,
        }
    raise ConfigError(f"cannot checkpoint a {type(model).__name__}")


def save_checkpoint(model, path, seed: int | None = None) -> None:
    """Self-describing binary: version byte, JSON header, named f32 tensors."""
    params = model.parameters()
    header = _config_to_dict(model)
    header["seed"] = seed
    header["n_params"] = len(params)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, t in params:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", t.data.ndim))
            for extent in t.data.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Rebuild a model from a checkpoint; returns (model, seed)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0
    (version,) = struct.unpack_from("<B", raw, off)
    off += 1
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off : off + blob_len].decode("utf-8"))
    off += blob_len

    rng = Rng(header.get("seed") or 0)
    kind = header["kind"]
    if kind == "ftt":
        cfg = FTTConfig(**{**header["config"],
                           "projection_dims": tuple(header["config"]["projection_dims"])})
        model = FTTransformer(cfg, rng, dtype)
    elif kind == "duo":
        cfg_a = FTTConfig(**{**header["a"], "projection_dims": tuple(header["a"]["projection_dims"])})
        cfg_b = FTTConfig(**{**header["b"], "projection_dims": tuple(header["b"]["projection_dims"])})
        model = DuoFTT(cfg_a, cfg_b, rng, dtype)
    elif kind == "mlp":
        model = Mlp(MlpConfig(**header["config"]), header["n_features"],
                    header["n_classes"], rng, dtype)
    else:
        raise ConfigError(f"unknown checkpoint kind {kind!r}")

    params = dict(model.parameters())
    for _ in range(header["n_params"]):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = []
        for _ in range(ndim):
            (extent,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape.append(extent)
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        off += 4 * count
        if name not in params:
            raise ConfigError(f"checkpoint has unknown parameter {name!r}")
        t = params[name]
        if tuple(shape) != t.data.shape:
            raise ShapeError(
                f"checkpoint parameter {name!r} has shape {tuple(shape)}, "
                f"model expects {t.data.shape}"
            )
        t.data = values.reshape(shape).astype(dtype)
    return model, header.get("seed")

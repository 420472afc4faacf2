import numpy as np
import pytest

from tabssl.errors import ConfigError, NumericError, ShapeError, StateError
from tabssl.model import (
    DuoFTT,
    mlp_forward,
    FTTConfig,
    FTTransformer,
    Mlp,
    MlpConfig,
    extract_arm,
    load_checkpoint,
    save_checkpoint,
)
from tabssl.rng import Rng
from tabssl.tensor import Tensor, softmax


def small_cfg(**kw):
    base = dict(n_features=3, token_dim=8, n_layers=1, n_heads=2,
                residual_dropout=0.0, attention_dropout=0.0, ffn_dropout=0.0,
                projection_dims=(8, 4))
    base.update(kw)
    return FTTConfig(**base)


def small_model(seed=0, dtype=np.float64, **kw):
    return FTTransformer(small_cfg(**kw), Rng(seed), dtype)


# -- config validation -----------------------------------------------------------


def test_config_head_divisibility():
    with pytest.raises(ConfigError):
        small_cfg(token_dim=10, n_heads=4)


def test_config_dropout_range():
    with pytest.raises(ConfigError):
        small_cfg(ffn_dropout=1.0)


def test_config_mask_rate_range():
    with pytest.raises(ConfigError):
        small_cfg(mask_rate=1.5)


# -- tokenize ---------------------------------------------------------------------


def test_tokenize_shape():
    m = FTTransformer(FTTConfig(n_features=3, token_dim=4, n_layers=1, n_heads=2,
                                projection_dims=(4,)), Rng(0), np.float64)
    toks = m.tokenize(np.zeros((1, 3)))
    assert toks.shape == (1, 3, 4)


def test_tokenize_zero_input_gives_biases():
    m = small_model()
    toks = m.tokenize(np.zeros((1, 3)))
    assert np.allclose(toks.data[0], m.tokenizer_bias.data)


def test_tokenize_feature_locality():
    m = small_model()
    x = np.random.default_rng(0).normal(size=(1, 3))
    base = m.tokenize(x).data.copy()
    x2 = x.copy()
    x2[0, 1] += 1.0
    bumped = m.tokenize(x2).data
    changed = np.abs(bumped - base).sum(axis=2)[0] > 0
    assert list(changed) == [False, True, False]


def test_tokenize_length_mismatch():
    with pytest.raises(ShapeError):
        small_model().tokenize(np.zeros((1, 5)))


def test_tokenize_rejects_nan():
    x = np.zeros((1, 3))
    x[0, 1] = np.nan
    with pytest.raises(NumericError):
        small_model().tokenize(x)


# -- MTR mask ---------------------------------------------------------------------


def test_mtr_zero_rate_identity():
    m = small_model()
    toks = m.tokenize(np.random.default_rng(1).normal(size=(2, 3)))
    out, mask = m.apply_mtr_mask(toks, 0.0, None)
    assert out is toks
    assert not mask.any()


def test_mtr_full_rate_every_row_is_mask_token():
    m = small_model()
    toks = m.tokenize(np.random.default_rng(2).normal(size=(2, 3)))
    out, mask = m.apply_mtr_mask(toks, 1.0, Rng(0).stream("mask"))
    assert mask.all()
    assert np.allclose(out.data, np.broadcast_to(m.mask_token.data, out.shape))


def test_mtr_full_rate_idempotent():
    m = small_model()
    toks = m.tokenize(np.random.default_rng(3).normal(size=(2, 3)))
    once, _ = m.apply_mtr_mask(toks, 1.0, Rng(0).stream("mask"))
    twice, _ = m.apply_mtr_mask(once, 1.0, Rng(1).stream("mask"))
    assert np.array_equal(once.data, twice.data)


def test_mtr_masked_fraction_monte_carlo():
    cfg = FTTConfig(n_features=1000, token_dim=4, n_layers=1, n_heads=2,
                    projection_dims=(4,))
    m = FTTransformer(cfg, Rng(0), np.float64)
    toks = m.tokenize(np.zeros((100, 1000)))
    _, mask = m.apply_mtr_mask(toks, 0.45, Rng(0).stream("mask"))
    assert abs(mask.mean() - 0.45) < 0.01


def test_mtr_forced_mask_overrides():
    m = small_model()
    toks = m.tokenize(np.random.default_rng(4).normal(size=(2, 3)))
    forced = np.array([True, False, True])
    out, mask = m.apply_mtr_mask(toks, 0.0, None, forced_mask=forced)
    assert np.array_equal(mask, np.tile(forced, (2, 1)))
    assert np.allclose(out.data[:, 0], m.mask_token.data)
    assert np.allclose(out.data[:, 1], toks.data[:, 1])


# -- encoder ----------------------------------------------------------------------


def test_encoder_zero_weights_passes_class_token_through():
    m = small_model()
    for name, p in m.parameters():
        if ".attn." in name or ".ffn" in name:
            p.data[...] = 0.0
    latent, _ = m.encoder_forward(m.tokenize(np.zeros((2, 3))))
    ct = m.class_token.data
    mu = ct.mean()
    want = (ct - mu) / np.sqrt(((ct - mu) ** 2).mean() + 1e-5)
    assert np.allclose(latent.data, np.tile(want, (2, 1)), atol=1e-12)


def test_encoder_attention_rows_sum_to_one():
    m = small_model()
    toks = m.tokenize(np.random.default_rng(5).normal(size=(2, 3)))
    _, _, attns = m.encoder_forward(toks, return_attention=True)
    for a in attns:
        assert np.abs(a.sum(axis=-1) - 1.0).max() < 1e-6


def test_encoder_token_permutation_equivariance():
    m = small_model()
    toks = m.tokenize(np.random.default_rng(6).normal(size=(2, 3)))
    perm = np.array([2, 0, 1])
    latent_a, out_a = m.encoder_forward(toks)
    latent_b, out_b = m.encoder_forward(Tensor(toks.data[:, perm, :]))
    assert np.abs(latent_a.data - latent_b.data).max() < 1e-6
    # feature positions (after the class slot) move with the permutation
    assert np.abs(out_a.data[:, 1 + perm, :] - out_b.data[:, 1:, :]).max() < 1e-6


def test_encoder_nonfinite_names_layer():
    m = small_model()
    toks = m.tokenize(np.random.default_rng(7).normal(size=(1, 3)))
    toks.data[0, 0, 0] = np.inf
    with np.errstate(invalid="ignore"):
        with pytest.raises(NumericError, match="layer"):
            m.encoder_forward(toks)


# -- project / classify --------------------------------------------------------------


def test_project_zero_latent_zero_bias():
    m = small_model()
    for name, p in m.parameters(parts=("projection",)):
        if name.endswith("bias"):
            p.data[...] = 0.0
    z = m.project(Tensor(np.zeros((2, 8))))
    assert np.array_equal(z.data, np.zeros((2, 4)))


def test_project_output_dim():
    m = small_model()
    z = m.project(Tensor(np.random.default_rng(8).normal(size=(5, 8))))
    assert z.shape == (5, 4)


def test_project_uses_every_latent_coordinate():
    m = small_model(seed=1)
    rng = np.random.default_rng(9)
    base = m.project(Tensor(rng.normal(size=(1, 8)))).data
    for j in range(8):
        x = rng.normal(size=(1, 8))
        x2 = x.copy()
        x2[0, j] += 0.5
        a = m.project(Tensor(x)).data
        b = m.project(Tensor(x2)).data
        assert np.abs(a - b).max() > 0


def test_classify_c23_logit_count():
    m = small_model()
    m.attach_classifier(23, Rng(0))
    logits = m.logits(np.random.default_rng(10).normal(size=(2, 3)))
    assert logits.shape == (2, 23)


def test_classify_zero_weights_uniform_argmax_zero():
    m = small_model()
    m.attach_classifier(4, Rng(0))
    for _, p in m.parameters(parts=("classifier",)):
        p.data[...] = 0.0
    logits = m.logits(np.random.default_rng(11).normal(size=(3, 3)))
    assert np.array_equal(logits.data, np.zeros((3, 4)))
    assert np.argmax(logits.data, axis=1).tolist() == [0, 0, 0]


def test_classify_softmax_sums_to_one():
    m = small_model()
    m.attach_classifier(5, Rng(0))
    logits = m.logits(np.random.default_rng(12).normal(size=(4, 3)))
    probs = softmax(logits, axis=-1).data
    assert np.allclose(probs.sum(axis=1), 1.0)


def test_classify_without_head_is_state_error():
    m = small_model()
    with pytest.raises(StateError, match="finetune not initialized"):
        m.classify(Tensor(np.zeros((1, 8))))


# -- duo --------------------------------------------------------------------------


def _copy_params(src, dst):
    for (_, a), (_, b) in zip(src.parameters(), dst.parameters()):
        b.data[...] = a.data


def test_duo_identical_arms_fuse_to_arm_output():
    duo = DuoFTT(small_cfg(), small_cfg(), Rng(0), np.float64)
    _copy_params(duo.arm_a, duo.arm_b)
    x = np.random.default_rng(13).normal(size=(2, 3))
    clean, _ = duo.duo_forward_pretrain(x, x, p_m=0.0, rng=None, training=False)
    solo = duo.arm_a.project(duo.arm_a.embed(x))
    assert np.allclose(clean.data, solo.data, atol=1e-12)


def test_duo_opposite_arms_fuse_to_zero():
    duo = DuoFTT(small_cfg(), small_cfg(), Rng(0), np.float64)
    _copy_params(duo.arm_a, duo.arm_b)
    last = [p for n, p in duo.arm_b.parameters(parts=("projection",))]
    for p in last[-2:]:  # negate final projection linear (weight and bias)
        p.data[...] = -p.data
    x = np.random.default_rng(14).normal(size=(2, 3))
    clean, _ = duo.duo_forward_pretrain(x, x, p_m=0.0, rng=None, training=False)
    assert np.abs(clean.data).max() < 1e-12


def test_duo_fusion_is_arithmetic_mean():
    duo = DuoFTT(small_cfg(), small_cfg(n_features=5), Rng(3), np.float64)
    rng = np.random.default_rng(15)
    xa, xb = rng.normal(size=(4, 3)), rng.normal(size=(4, 5))
    clean, _ = duo.duo_forward_pretrain(xa, xb, p_m=0.0, rng=None, training=False)
    ua = duo.arm_a.project(duo.arm_a.embed(xa)).data
    ub = duo.arm_b.project(duo.arm_b.embed(xb)).data
    assert np.abs(clean.data - (ua + ub) / 2).max() < 1e-6


def test_duo_finetune_logits_average():
    duo = DuoFTT(small_cfg(), small_cfg(), Rng(4), np.float64)
    duo.attach_classifier(3, Rng(5))
    rng = np.random.default_rng(16)
    xa, xb = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    fused = duo.duo_forward_finetune(xa, xb)
    la = duo.arm_a.logits(xa).data
    lb = duo.arm_b.logits(xb).data
    assert np.abs(fused.data - (la + lb) / 2).max() < 1e-12


def test_duo_finetune_needs_heads():
    duo = DuoFTT(small_cfg(), small_cfg(), Rng(6), np.float64)
    with pytest.raises(StateError):
        duo.duo_forward_finetune(np.zeros((1, 3)), np.zeros((1, 3)))


def test_duo_mismatched_projection_dims():
    with pytest.raises(ConfigError):
        DuoFTT(small_cfg(), small_cfg(projection_dims=(8, 6)), Rng(0), np.float64)


# -- extract_arm ---------------------------------------------------------------------


def test_extract_arm_forward_matches_standalone():
    duo = DuoFTT(small_cfg(), small_cfg(), Rng(7), np.float64)
    arm = extract_arm(duo, "a")
    x = np.random.default_rng(17).normal(size=(3, 3))
    assert np.abs(arm.embed(x).data - duo.arm_a.embed(x).data).max() < 1e-7


def test_extract_both_arms_parameter_disjoint():
    duo = DuoFTT(small_cfg(), small_cfg(), Rng(8), np.float64)
    a = {id(p) for _, p in extract_arm(duo, "a").parameters()}
    b = {id(p) for _, p in extract_arm(duo, "b").parameters()}
    assert a.isdisjoint(b)


def test_extract_arm_shares_mask_token_bitwise():
    duo = DuoFTT(small_cfg(), small_cfg(), Rng(9), np.float64)
    arm = extract_arm(duo, "b")
    assert arm.mask_token.data.tobytes() == duo.arm_b.mask_token.data.tobytes()


def test_extract_arm_attaches_fresh_head():
    duo = DuoFTT(small_cfg(), small_cfg(), Rng(10), np.float64)
    arm = extract_arm(duo, "a", n_classes=4, rng=Rng(11))
    assert arm.logits(np.zeros((1, 3))).shape == (1, 4)


# -- MLP ---------------------------------------------------------------------------


def test_mlp_zero_weights_uniform_logits():
    mlp = Mlp(MlpConfig(n_layers=1), 4, 3, Rng(0), np.float64)
    for _, p in mlp.parameters():
        p.data[...] = 0.0
    out = mlp_forward(np.random.default_rng(18).normal(size=(2, 4)), mlp)
    assert np.array_equal(out.data, np.zeros((2, 3)))


def test_mlp_output_dim():
    mlp = Mlp(MlpConfig(n_layers=3, layer_size_factor=0.5), 16, 5, Rng(1), np.float64)
    assert mlp_forward(np.zeros((2, 16)), mlp).shape == (2, 5)


def test_mlp_gradient_check():
    from tabssl.gradcheck import check_gradient
    from tabssl.objectives import cross_entropy

    mlp = Mlp(MlpConfig(n_layers=2), 4, 3, Rng(2), np.float64)
    x = np.random.default_rng(19).normal(size=(4, 4))
    y = np.array([0, 1, 2, 0])
    report = check_gradient(
        lambda: cross_entropy(mlp_forward(x, mlp), y), mlp.parameters(),
        tolerance=1e-5)
    assert report.passed, str(report)


# -- backbone sharing / checkpoints ----------------------------------------------------


def test_attach_classifier_keeps_backbone_objects():
    m = small_model()
    before = {name: id(p) for name, p in m.parameters(parts=("backbone",))}
    m.attach_classifier(3, Rng(0))
    after = {name: id(p) for name, p in m.parameters(parts=("backbone",))}
    assert before == after


def test_checkpoint_roundtrip(tmp_path):
    m = small_model(dtype=np.float32)
    m.attach_classifier(3, Rng(1))
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, seed=42)
    loaded, seed = load_checkpoint(path)
    assert seed == 42
    for (na, pa), (nb, pb) in zip(m.parameters(), loaded.parameters()):
        assert na == nb
        assert pa.data.tobytes() == pb.data.tobytes()
    x = np.random.default_rng(20).normal(size=(2, 3))
    assert np.array_equal(m.logits(x).data, loaded.logits(x).data)


def test_checkpoint_version_byte(tmp_path):
    m = small_model(dtype=np.float32)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    assert path.read_bytes()[0] == 1

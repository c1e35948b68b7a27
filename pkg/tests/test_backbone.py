import numpy as np
import pytest

from moeffd import tensor as T
from moeffd.backbone import PatchEmbedWeights, ViTBlockWeights, attention, block_forward, patch_embed
from moeffd.config import ModelConfig, preset
from moeffd.errors import ConfigError, DimensionError
from moeffd.model import MoEFFDModel, model_forward
from moeffd.oracles import attention_loops, model_straight_line, patches_loops
from moeffd.tensor import Tensor
from moeffd.verify import gradcheck_model


def _embed(cfg, seed=0):
    return PatchEmbedWeights.create(cfg, np.random.default_rng(seed))


def test_token_count():
    cfg = preset("tiny", image_size=32, patch_size=8)
    assert cfg.n_tokens == 17
    assert patch_embed(np.zeros((3, 32, 32)), _embed(cfg), cfg).shape == (1, 17, cfg.embed_dim)


def test_config_invariants():
    with pytest.raises(ConfigError):
        ModelConfig(image_size=30, patch_size=8)
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=10, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(lora_ranks=[64])


def test_zero_image_zero_weights_gives_positional_embedding():
    cfg = preset("tiny")
    e = _embed(cfg)
    e.weight.value.data[...] = 0.0
    tok = patch_embed(np.zeros((1, 3, 16, 16)), e, cfg).data[0]
    np.testing.assert_array_equal(tok[1:], e.pos_embed.value.data[1:])
    np.testing.assert_array_equal(tok[0], e.cls_token.value.data + e.pos_embed.value.data[0])


def test_patch_embed_matches_loop_oracle():
    cfg = preset("tiny")
    e = _embed(cfg, 1)
    img = np.random.default_rng(2).uniform(size=(3, 16, 16))
    got = patch_embed(img, e, cfg).data[0, 1:]
    ref = patches_loops(img, cfg.patch_size) @ e.weight.value.data + e.pos_embed.value.data[1:]
    assert np.abs(got - ref).max() <= 1e-12


def test_patch_embed_size_mismatch():
    cfg = preset("tiny")
    with pytest.raises(DimensionError):
        patch_embed(np.zeros((1, 3, 8, 8)), _embed(cfg), cfg)


def _block(cfg, seed=0, std=0.5):
    return ViTBlockWeights.create("b", ModelConfig(**{**cfg.__dict__, "init_std": std}), np.random.default_rng(seed))


def test_attention_single_token():
    cfg = preset("tiny")
    w = _block(cfg)
    x = np.random.default_rng(3).standard_normal((1, cfg.dim))
    got = attention(Tensor(x), w, cfg.heads).data
    ref = x @ w.w_v.value.data @ w.w_o.value.data
    assert np.abs(got - ref).max() <= 1e-12


def test_attention_matches_scalar_loops():
    cfg = preset("tiny", heads=1)
    w = _block(cfg)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, cfg.dim))
    d = [rng.standard_normal((3, cfg.dim)) for _ in range(3)]
    ws = [w.w_q, w.w_k, w.w_v, w.w_o]
    ref = attention_loops(x, *(p.value.data for p in ws), 1, *d)
    got = attention(Tensor(x), w, 1, *(Tensor(v) for v in d)).data
    assert np.abs(got - ref).max() <= 1e-10
    plain = attention_loops(x, *(p.value.data for p in ws), 1)
    zeros = [Tensor(np.zeros_like(v)) for v in d]
    np.testing.assert_array_equal(attention(Tensor(x), w, 1, *zeros).data, attention(Tensor(x), w, 1).data)
    assert np.abs(attention(Tensor(x), w, 1).data - plain).max() <= 1e-10


def test_attention_delta_shape_error():
    cfg = preset("tiny")
    with pytest.raises(DimensionError):
        attention(Tensor(np.ones((1, 3, cfg.dim))), _block(cfg), cfg.heads, Tensor(np.ones((1, 2, cfg.dim))))


def test_attention_patch_permutation_equivariance():
    cfg = preset("tiny")
    w = _block(cfg)
    x = np.random.default_rng(5).standard_normal((1, 6, cfg.dim))
    perm = np.array([0, 3, 1, 5, 2, 4])          # class token stays at 0
    a = attention(Tensor(x), w, cfg.heads).data
    b = attention(Tensor(x[:, perm]), w, cfg.heads).data
    assert np.abs(a[:, perm] - b).max() <= 1e-12


def test_lora_path_permutation_equivariance():
    cfg = preset("tiny", adapter=False, top_k=2, init_std=0.3)
    model, images, _ = gradcheck_model(cfg, batch=1)
    blk = model.blocks[0]
    x = patch_embed(images, model.embed, cfg)
    perm = np.array([0] + list(np.random.default_rng(6).permutation(np.arange(1, cfg.n_tokens))))
    a, _ = block_forward(x, blk.weights, cfg, blk.lora)
    b, _ = block_forward(x[:, perm], blk.weights, cfg, blk.lora)
    assert np.abs(a.data[:, perm] - b.data).max() <= 1e-9


def test_zeroed_experts_give_plain_block():
    cfg = preset("tiny", top_k=2, init_std=0.3)
    model, images, _ = gradcheck_model(cfg)
    for blk in model.blocks:
        for ex in blk.lora.experts:
            for up in ex.up.values():
                up.value.data[...] = 0.0
        for ex in blk.adapter.experts:
            ex.up.value.data[...] = 0.0
    x = patch_embed(images, model.embed, cfg)
    blk = model.blocks[0]
    full, rec = block_forward(x, blk.weights, cfg, blk.lora, blk.adapter)
    plain, none = block_forward(x, blk.weights, cfg)
    np.testing.assert_array_equal(full.data, plain.data)
    assert set(rec) == {"lora", "adapter"} and none == {}
    assert full.shape == x.shape


def test_two_block_straight_line_oracle():
    cfg = preset("tiny", depth=2, top_k=2, init_std=0.3)
    model, images, _ = gradcheck_model(cfg, batch=2)
    logits, _ = model_forward(images, model)
    for i in range(2):
        assert np.abs(logits.data[i] - model_straight_line(images[i], model)).max() <= 1e-9


def test_fresh_model_equals_plain_frozen_vit():
    # LoRA and adapter up-projections start at zero, so the expert paths vanish at initialisation
    cfg = preset("tiny", dtype="float64")
    model = MoEFFDModel.build(cfg)
    plain = MoEFFDModel.build(preset("tiny", dtype="float64", mode="backbone_only"))
    images = np.random.default_rng(7).uniform(size=(2, 3, 16, 16))
    with T.no_grad():
        a, _ = model_forward(images, model)
    x = patch_embed(images, model.embed, cfg)
    for blk in model.blocks:
        x, _ = block_forward(x, blk.weights, cfg)
    cls = T.layer_norm(x[:, 0, :], model.norm_scale.value, model.norm_shift.value, cfg.ln_eps)
    ref = cls @ model.head_weight.value + model.head_bias.value
    np.testing.assert_array_equal(a.data, ref.data)
    assert plain.blocks[0].lora is None and plain.blocks[0].adapter is None

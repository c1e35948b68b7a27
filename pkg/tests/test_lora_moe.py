import numpy as np
import pytest

from moeffd import lora_moe, oracles
from moeffd import tensor as T
from moeffd.config import preset
from moeffd.lora_moe import PROJECTIONS, LoRAExpert, MoELoRALayer, lora_expert_forward, moe_lora_forward
from moeffd.tensor import Tensor


def layer(top_k=2, seed=0, ranks=(1, 2, 3), scale=0.5):
    cfg = preset("tiny", top_k=top_k, lora_ranks=list(ranks), init_std=0.3)
    lay = MoELoRALayer.create("l", cfg, np.random.default_rng(seed))
    rng = np.random.default_rng([seed, 1])
    for p in lay.parameters():
        p.value.data = rng.standard_normal(p.value.shape) * scale
    return cfg, lay


def tokens(cfg, b=2, seed=3):
    return np.random.default_rng(seed).standard_normal((b, cfg.n_tokens, cfg.dim))


def test_expert_init_is_zero_delta():
    ex = LoRAExpert.create("e", 2, 8, 8, np.random.default_rng(0), "float64")
    assert not lora_expert_forward(Tensor(np.ones((3, 8))), ex, "q").data.any()
    assert ex.n_params() == 3 * 2 * (8 + 8)


def test_expert_zero_down_and_linearity():
    rng = np.random.default_rng(1)
    ex = LoRAExpert.create("e", 2, 8, 8, rng, "float64")
    for p in ex.parameters():
        p.value.data = rng.standard_normal(p.value.shape)
    x = rng.standard_normal((5, 8))
    a = lora_expert_forward(Tensor(x), ex, "k").data
    np.testing.assert_allclose(lora_expert_forward(Tensor(2 * x), ex, "k").data, 2 * a, rtol=0, atol=1e-12)
    ref = x @ (ex.down["k"].value.data @ ex.up["k"].value.data)
    assert np.abs(a - ref).max() <= 1e-12
    ex.down["v"].value.data[...] = 0.0
    assert not lora_expert_forward(Tensor(x), ex, "v").data.any()
    with pytest.raises(ValueError):
        lora_expert_forward(Tensor(x), ex, "o")


def test_top1_uses_one_expert_with_weight_one():
    cfg, lay = layer(top_k=1)
    x = tokens(cfg, b=1)
    dq, dk, dv, dec = moe_lora_forward(Tensor(x), lay)
    (e,) = dec.selected[0]
    assert dec.weights.data[0, e] == 1.0
    for proj, d in zip(PROJECTIONS, (dq, dk, dv)):
        np.testing.assert_array_equal(d.data[0], lora_expert_forward(Tensor(x[0]), lay.experts[e], proj).data)


def test_zero_up_gives_zero_deltas():
    cfg, lay = layer(top_k=2)
    for ex in lay.experts:
        for p in ex.up.values():
            p.value.data[...] = 0.0
    for d in moe_lora_forward(Tensor(tokens(cfg)), lay)[:3]:
        assert not d.data.any()


@pytest.mark.parametrize("k", [1, 2, 3])
def test_sparse_matches_masked_dense(k):
    cfg, lay = layer(top_k=k, seed=k)
    x = tokens(cfg, b=3, seed=k)
    dq, dk, dv, _ = moe_lora_forward(Tensor(x), lay)
    for b in range(3):
        g = oracles.topk_dense(x[b].mean(axis=0) @ lay.gate.w_gate.value.data, k)
        for proj, d in zip(PROJECTIONS, (dq, dk, dv)):
            assert np.abs(d.data[b] - oracles.lora_dense(x[b], lay.experts, g, proj)).max() <= 1e-9


def test_exactly_k_experts_evaluated(monkeypatch):
    cfg, lay = layer(top_k=2)
    calls = []
    real = lora_moe.lora_expert_forward

    def spy(x, ex, proj):
        calls.append(id(ex))
        return real(x, ex, proj)

    monkeypatch.setattr(lora_moe, "lora_expert_forward", spy)
    moe_lora_forward(Tensor(tokens(cfg, b=1)), lay)
    assert len(set(calls)) == 2 and len(calls) == 6


def test_expert_permutation_equivariance():
    cfg, lay = layer(top_k=2)
    x = Tensor(tokens(cfg))
    before = moe_lora_forward(x, lay)[:3]
    perm = [2, 0, 1]
    lay.experts = [lay.experts[i] for i in perm]
    lay.gate.w_gate.value.data = lay.gate.w_gate.value.data[:, perm]
    lay.gate.w_noise.value.data = lay.gate.w_noise.value.data[:, perm]
    after = moe_lora_forward(x, lay)[:3]
    for a, b in zip(before, after):
        assert np.abs(a.data - b.data).max() <= 1e-9


def test_layer_parameter_count():
    cfg, lay = layer(ranks=(1, 2, 3))
    d = cfg.embed_dim
    gate = 2 * cfg.dim * 3
    assert sum(p.value.data.size for p in lay.parameters()) == sum(3 * r * (d + cfg.dim) for r in (1, 2, 3)) + gate


def test_lora_gradients():
    cfg, lay = layer(top_k=3, ranks=(1, 2, 3))
    x = Tensor(tokens(cfg, b=2))
    r = [Tensor(np.random.default_rng(i).standard_normal((2, cfg.n_tokens, cfg.dim))) for i in range(3)]
    params = [p.value for ex in lay.experts for p in ex.parameters()]

    def fn():
        return sum((d * ri).sum() for d, ri in zip(moe_lora_forward(x, lay)[:3], r))

    assert T.finite_difference_gradcheck(fn, params) <= 1e-5

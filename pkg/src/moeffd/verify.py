"""Self-verification suite: gradient checks and oracle comparisons.

``run_checks("fast")`` finishes in well under two minutes on one CPU core;
``"full"`` adds more random cases and an end-to-end 64-bit gradient check of
the total loss on a sampled subset of all trainable parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import oracles
from . import tensor as T
from .config import ModelConfig, preset
from .diffconv import ALL_KINDS, diff_conv_forward
from .gating import GateWeights, fixed_decision, moe_loss, topk_gate
from .lora_moe import moe_lora_forward
from .adapter_moe import moe_adapter_forward
from .metrics import auc, eer
from .model import MoEFFDModel, freeze_partition, model_forward, total_loss
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def gradcheck_model(cfg: ModelConfig | None = None, seed: int = 0, scale: float = 0.5, batch: int = 6):
    """Tiny 64-bit model with O(1) random trainable weights, top-3 routing and noise off.

    Zero-initialised up-projections would make every down-projection gradient
    exactly zero, and Top-1 gates have no gradient at all, so both are avoided.
    """
    cfg = cfg or preset("tiny", depth=1, top_k=3, init_std=0.3)
    model = MoEFFDModel.build(cfg)
    rng = np.random.default_rng([seed, 99])
    for p in freeze_partition(model)[0]:
        p.value.data = (rng.standard_normal(p.value.shape) * scale).astype(cfg.dtype)
    images = rng.uniform(0.0, 1.0, (batch, cfg.in_channels, cfg.image_size, cfg.image_size))
    labels = np.arange(batch) % 2
    return model, images, labels


def _loss_fn(model, images, labels, lam, probe=None):
    """Training loss, plus ⟨probe, tokens⟩ over the final token sequence when a probe is given.

    In a single block the adapter never reaches the class token (its class row
    is zero), so the probe term is what gives adapter weights a gradient.
    """
    def fn():
        logits, records, tokens = model_forward(images, model, training=False, return_tokens=True)
        loss = total_loss(logits, labels, records, lam)
        return loss if probe is None else loss + (tokens * Tensor(probe)).sum()
    return fn


CLASSES = {
    "lora.down": lambda n: ".lora.experts." in n and n.endswith(".down"),
    "lora.up": lambda n: ".lora.experts." in n and n.endswith(".up"),
    "adapter.down": lambda n: ".adapter.experts." in n and n.endswith(".down"),
    "adapter.mid": lambda n: ".adapter.experts." in n and n.endswith(".mid"),
    "adapter.up": lambda n: ".adapter.experts." in n and n.endswith(".up"),
    "gate.w_gate": lambda n: n.endswith(".w_gate"),
    "head": lambda n: n.startswith("head."),
}


def _class_errors(model, images, labels, seed, eps, out):
    trainable = freeze_partition(model)[0]
    shape = (images.shape[0], model.cfg.n_tokens, model.cfg.dim)
    probe = np.random.default_rng([seed, 98]).standard_normal(shape) * 0.1
    fn = _loss_fn(model, images, labels, 1.0, probe)
    for cls, match in CLASSES.items():
        params = [p.value for p in trainable if match(p.name)]
        if not params:
            continue
        # a vanishing analytic gradient would make the comparison vacuous
        for p in params:
            p.grad = None
        fn().backward()
        live = sum(1 for p in params if p.grad is not None and np.abs(p.grad).max() > 0)
        err = T.finite_difference_gradcheck(fn, params, eps=eps)
        prev = out.get(cls, (0.0, 0, 0))
        out[cls] = (max(prev[0], err), max(prev[1], live), max(prev[2], len(params)))


def check_gradients(seed: int = 0, eps: float = 1e-5) -> dict[str, tuple[float, int, int]]:
    """Per trainable tensor class on 1-block tiny models: (max relative error, most tensors with a
    nonzero gradient in one pass, tensors in the class).

    The routed pass (top-3, learned gates) leaves unselected experts without a
    gradient, so a second pass with every expert active covers the rest.
    """
    out: dict[str, tuple[float, int, int]] = {}
    model, images, labels = gradcheck_model(seed=seed)
    _class_errors(model, images, labels, seed, eps, out)
    cfg = preset("tiny", depth=1, top_k=3, init_std=0.3, mode="multi_experts")
    model, images, labels = gradcheck_model(cfg, seed=seed)
    _class_errors(model, images, labels, seed, eps, out)
    for cls, (_, live, total) in out.items():
        if live == 0:
            raise AssertionError(f"{cls}: gradient is identically zero")
    if set(out) != set(CLASSES):
        raise AssertionError(f"tensor classes without trainable tensors: {sorted(set(CLASSES) - set(out))}")
    return out


def check_noise_gradient(seed: int = 0, eps: float = 1e-5) -> float:
    """W_noise gradient with a fixed, replayed noise draw (the noise path is otherwise random)."""
    from .gating import gate_logits, topk_gate, importance
    rng = np.random.default_rng([seed, 5])
    gate = GateWeights.create("g", 6, 4, rng, "float64", 0.5)
    gate.w_noise.value.data = rng.standard_normal((6, 4)) * 0.5
    x = Tensor(rng.standard_normal((5, 6)))
    noise = rng.standard_normal((5, 4))

    def fn():
        _, noisy, _ = gate_logits(x, gate, True, noise=noise)
        dec = topk_gate(noisy, 2)
        return moe_loss(importance(dec)) + (dec.weights * Tensor(rng_w)).sum()

    rng_w = np.random.default_rng([seed, 6]).standard_normal((5, 4))
    return T.finite_difference_gradcheck(fn, [gate.w_gate.value, gate.w_noise.value], eps=eps)


def check_diffconv(cases: int = 50, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, 1])
    worst = 0.0
    for i in range(cases):
        kind = ALL_KINDS[i % len(ALL_KINDS)]
        c_in, c_out = rng.integers(1, 4), rng.integers(1, 4)
        h, w = rng.integers(1, 8), rng.integers(1, 8)
        x = rng.standard_normal((c_in, h, w))
        wt = rng.standard_normal((c_out, c_in, 3, 3))
        fast = diff_conv_forward(x, Tensor(wt), kind).data
        worst = max(worst, float(np.abs(fast - oracles.naive_diff_conv(x, wt, kind)).max()))
    return worst


def check_gating(n_vectors: int = 1000, seed: int = 0) -> dict[str, float]:
    """Worst violation of each gating property over random logit vectors."""
    rng = np.random.default_rng([seed, 2])
    worst = {"nonzero": 0.0, "sum": 0.0, "shift": 0.0, "perm": 0.0}
    for _ in range(n_vectors):
        n_e = int(rng.integers(1, 9))
        logits = rng.standard_normal(n_e) * rng.uniform(0.1, 10.0)
        for k in sorted({min(1, n_e), min(2, n_e), min(3, n_e), n_e}):
            w = topk_gate(Tensor(logits), k).weights.data.reshape(-1)
            worst["nonzero"] = max(worst["nonzero"], abs(int((w != 0).sum()) - min(k, n_e)))
            worst["sum"] = max(worst["sum"], abs(w.sum() - 1.0))
            shifted = topk_gate(Tensor(logits + rng.uniform(-50, 50)), k).weights.data.reshape(-1)
            worst["shift"] = max(worst["shift"], float(np.abs(shifted - w).max()))
            perm = rng.permutation(n_e)
            permuted = topk_gate(Tensor(logits[perm]), k).weights.data.reshape(-1)
            worst["perm"] = max(worst["perm"], float(np.abs(permuted - w[perm]).max()))
    return worst


def check_moe_loss() -> dict[str, float]:
    rng = np.random.default_rng(3)
    const = max(float(moe_loss(Tensor(np.full(n, c))).data) for n in (2, 5, 7) for c in (0.1, 1.0, 37.0))
    scale = 0.0
    for _ in range(100):
        v = rng.uniform(0.1, 5.0, int(rng.integers(2, 8)))
        a = float(moe_loss(Tensor(v)).data)
        b = float(moe_loss(Tensor(v * rng.uniform(0.01, 100.0))).data)
        scale = max(scale, abs(a - b))
    return {"constant": const, "scale": scale, "one_three": float(moe_loss(Tensor(np.array([1.0, 3.0]))).data)}


def check_dispatch(n_inputs: int = 20, seed: int = 0) -> float:
    """k = N_e, noise off: sparse layers vs dense mixtures built from the oracles."""
    worst = 0.0
    for i in range(n_inputs):
        n_e_lora = 3
        cfg = preset("tiny", top_k=n_e_lora, adapter_kinds=["vanilla", "cdc", "soc"], init_std=0.3, seed=seed + i)
        model = MoEFFDModel.build(cfg)
        rng = np.random.default_rng([seed, 4, i])
        for p in freeze_partition(model)[0]:
            p.value.data = rng.standard_normal(p.value.shape) * 0.5
        blk = model.blocks[0]
        x = rng.standard_normal((2, cfg.n_tokens, cfg.embed_dim))
        dq, dk, dv, dec = moe_lora_forward(Tensor(x), blk.lora, training=False)
        delta, dec_a = moe_adapter_forward(Tensor(x), blk.adapter, training=False)
        for b in range(x.shape[0]):
            g = oracles.topk_dense(x[b].mean(axis=0) @ blk.lora.gate.w_gate.value.data, n_e_lora)
            for proj, got in zip("qkv", (dq, dk, dv)):
                ref = oracles.lora_dense(x[b], blk.lora.experts, g, proj)
                worst = max(worst, float(np.abs(got.data[b] - ref).max()))
            ga = oracles.topk_dense(x[b].mean(axis=0) @ blk.adapter.gate.w_gate.value.data, 3)
            ref = sum(gi * oracles.adapter_expert_loops(x[b], ex) for gi, ex in zip(ga, blk.adapter.experts))
            worst = max(worst, float(np.abs(delta.data[b] - ref).max()))
    return worst


def check_metrics(batches: int = 100, seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng([seed, 7])
    worst_auc = worst_eer = 0.0
    for _ in range(batches):
        n = int(rng.integers(4, 60))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        # coarse rounding produces plenty of ties
        scores = np.round(rng.uniform(0, 1, n), int(rng.integers(1, 4)))
        worst_auc = max(worst_auc, abs(auc(scores, labels) - oracles.auc_pairs(scores, labels)))
        worst_eer = max(worst_eer, abs(eer(scores, labels) - oracles.eer_exhaustive(scores, labels)))
    return {"auc": worst_auc, "eer": worst_eer}


def check_straight_line(seed: int = 0) -> float:
    cfg = preset("tiny", depth=2, top_k=2, init_std=0.3, seed=seed)
    model, images, _ = gradcheck_model(cfg, seed=seed, batch=1)
    logits, _ = model_forward(images, model, training=False)
    return float(np.abs(logits.data[0] - oracles.model_straight_line(images[0], model)).max())


def check_checkpoint(path) -> str:
    from . import checkpoint as ckpt
    ckpt.load(path, verify=True)
    return "all tensor checksums match"


def check_total_loss_sampled(seed: int = 0, fraction: float = 0.01, tol: float = 1e-4) -> float:
    """End-to-end total-loss gradient on ~1% of the trainable coordinates (at least 3 per tensor)."""
    cfg = preset("tiny", depth=2, top_k=2, init_std=0.3, seed=seed)
    model, images, labels = gradcheck_model(cfg, seed=seed, batch=3)
    trainable = [p.value for p in freeze_partition(model)[0]]
    fn = _loss_fn(model, images, labels, 1.0)
    worst = 0.0
    rng = np.random.default_rng([seed, 8])
    for p in trainable:
        n = max(3, int(round(fraction * p.data.size)))
        worst = max(worst, T.finite_difference_gradcheck(fn, [p], eps=1e-5, max_coords=n, rng=rng))
    return worst


def run_checks(level: str = "fast", checkpoint=None) -> list[CheckResult]:
    if level not in ("fast", "full"):
        raise ValueError(f"level must be 'fast' or 'full', got {level!r}")
    full = level == "full"
    results: list[CheckResult] = []

    def record(name, fn, judge):
        t0 = time.perf_counter()
        try:
            value = fn()
            ok, detail = judge(value)
        except Exception as exc:  # noqa: BLE001 - report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))

    record("diffconv oracle", lambda: check_diffconv(100 if full else 50),
           lambda v: (v <= 1e-9, f"max abs err {v:.2e}"))
    record("gradients per tensor class", check_gradients,
           lambda v: (max(e for e, _, _ in v.values()) <= 1e-5,
                      ", ".join(f"{k} {e:.1e} ({a}/{b} live)" for k, (e, a, b) in v.items())))
    record("gate noise gradient", check_noise_gradient, lambda v: (v <= 1e-5, f"rel err {v:.2e}"))
    record("gating properties", lambda: check_gating(1000),
           lambda v: (v["nonzero"] == 0 and v["sum"] <= 1e-6 and v["shift"] <= 1e-6 and v["perm"] <= 1e-12,
                      ", ".join(f"{k} {e:.1e}" for k, e in v.items())))
    record("moe loss", check_moe_loss,
           lambda v: (v["constant"] == 0 and v["scale"] <= 1e-12 and v["one_three"] == 0.25,
                      ", ".join(f"{k} {e!r}" for k, e in v.items())))
    record("sparse/dense dispatch", lambda: check_dispatch(20 if not full else 40),
           lambda v: (v <= 1e-9, f"max abs err {v:.2e}"))
    record("metrics oracles", lambda: check_metrics(100 if not full else 300),
           lambda v: (v["auc"] == 0.0 and v["eer"] == 0.0, f"auc {v['auc']!r}, eer {v['eer']!r}"))
    record("straight-line model", check_straight_line, lambda v: (v <= 1e-8, f"max abs err {v:.2e}"))
    if full:
        record("total loss 1% sample", check_total_loss_sampled, lambda v: (v <= 1e-4, f"rel err {v:.2e}"))
    if checkpoint is not None:
        record(f"checkpoint {checkpoint}", lambda: check_checkpoint(checkpoint), lambda v: (True, v))
    return results

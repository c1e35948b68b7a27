"""Slow, loop-based reference implementations used by the verification suite.

Nothing here shares code with the fast paths beyond reading parameter arrays,
so agreement between the two is meaningful evidence of correctness.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .diffconv import naive_diff_conv  # per-pixel difference-convolution oracle lives with its kinds


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def softmax_direct(x) -> np.ndarray:
    e = [math.exp(v) for v in x]
    s = sum(e)
    return np.array([v / s for v in e])


def layer_norm_loops(x: np.ndarray, scale: np.ndarray, shift: np.ndarray, eps: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    out = np.zeros_like(flat)
    d = flat.shape[1]
    for r in range(flat.shape[0]):
        mu = sum(flat[r]) / d
        var = sum((v - mu) ** 2 for v in flat[r]) / d
        for c in range(d):
            out[r, c] = (flat[r, c] - mu) / math.sqrt(var + eps) * scale[c] + shift[c]
    return out.reshape(x.shape)


def gelu_scalar(v: float) -> float:
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3)))


def patches_loops(image: np.ndarray, p: int) -> np.ndarray:
    """(C, H, W) -> (n_patches, C·P·P), row-major patches flattened channel, row, column."""
    c, h, w = image.shape
    rows = []
    for gi in range(h // p):
        for gj in range(w // p):
            vec = []
            for ch in range(c):
                for i in range(p):
                    for j in range(p):
                        vec.append(image[ch, gi * p + i, gj * p + j])
            rows.append(vec)
    return np.array(rows, dtype=np.float64)


def attention_loops(x: np.ndarray, wq, wk, wv, wo, heads: int, dq=None, dk=None, dv=None) -> np.ndarray:
    """Scalar-loop multi-head attention on one (N, D) token matrix."""
    n, _ = x.shape
    q = matmul_loops(x, wq) + (0 if dq is None else dq)
    k = matmul_loops(x, wk) + (0 if dk is None else dk)
    v = matmul_loops(x, wv) + (0 if dv is None else dv)
    dim = q.shape[1]
    dh = dim // heads
    ctx = np.zeros((n, dim))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            scores = [sum(q[i, sl] * k[j, sl]) / math.sqrt(dh) for j in range(n)]
            a = softmax_direct(scores)
            for j in range(n):
                ctx[i, sl] += a[j] * v[j, sl]
    return matmul_loops(ctx, wo)


def auc_pairs(scores, labels) -> float:
    """O(n²) pair counting: a fake above a real scores 1, a tie 0.5."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else (0.5 if a == b else 0.0)
    return total / (len(pos) * len(neg))


def eer_exhaustive(scores, labels) -> float:
    """Try every threshold (each score and +inf) by direct counting."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    best = None
    for t in sorted(set(scores)) + [math.inf]:
        fpr = Fraction(sum(1 for s in neg if s >= t), len(neg))
        fnr = Fraction(sum(1 for s in pos if s < t), len(pos))
        key = (abs(fpr - fnr), (fpr + fnr) / 2)
        if best is None or key < best:
            best = key
    return float(best[1])


def topk_dense(logits: np.ndarray, k: int) -> np.ndarray:
    """Dense gate weights: softmax over the k largest logits, ties to the lower index."""
    order = sorted(range(len(logits)), key=lambda i: (-logits[i], i))[:k]
    w = np.zeros(len(logits))
    sub = softmax_direct([logits[i] for i in order])
    for i, v in zip(order, sub):
        w[i] = v
    return w


def lora_dense(x: np.ndarray, experts, gate_weights: np.ndarray, proj: str) -> np.ndarray:
    """Σ_i G_i · x·(W_down·W_up), the product materialised first."""
    out = np.zeros((x.shape[0], experts[0].up[proj].value.shape[1]))
    for g, ex in zip(gate_weights, experts):
        out += g * (x @ (ex.down[proj].value.data @ ex.up[proj].value.data))
    return out


def adapter_expert_loops(x: np.ndarray, expert) -> np.ndarray:
    """One Convpass expert on one (N_t, D) token matrix, stage by stage."""
    n, d = x.shape
    side = math.isqrt(n - 1)
    down = expert.down.value.data
    up = expert.up.value.data
    grid = x[1:].reshape(side, side, d).transpose(2, 0, 1)           # (D, h, w)
    hid = np.einsum("md,dij->mij", down, grid)
    hid = np.vectorize(gelu_scalar)(hid)
    hid = naive_diff_conv(hid, expert.mid.value.data, expert.kind)
    hid = np.vectorize(gelu_scalar)(hid)
    out = np.einsum("dm,mij->dij", up, hid)
    tokens = np.zeros_like(x, dtype=np.float64)
    tokens[1:] = out.transpose(1, 2, 0).reshape(side * side, d)
    return tokens


def model_straight_line(image: np.ndarray, model) -> np.ndarray:
    """Noise-free forward of one image through the whole model without module boundaries."""
    cfg = model.cfg
    eps = cfg.ln_eps
    e = model.embed
    x = patches_loops(image, cfg.patch_size) @ e.weight.value.data
    x = np.vstack([e.cls_token.value.data[None], x]) + e.pos_embed.value.data
    for blk in model.blocks:
        w = blk.weights
        h = layer_norm_loops(x, w.ln1_scale.value.data, w.ln1_shift.value.data, eps)
        dq = dk = dv = None
        if blk.lora is not None:
            g = _route(h, blk.lora.gate, blk.lora.top_k, blk.lora.mode, len(blk.lora.experts))
            dq, dk, dv = (lora_dense(h, blk.lora.experts, g, p) for p in ("q", "k", "v"))
        x1 = x + attention_loops(h, w.w_q.value.data, w.w_k.value.data, w.w_v.value.data, w.w_o.value.data,
                                 cfg.heads, dq, dk, dv)
        h2 = layer_norm_loops(x1, w.ln2_scale.value.data, w.ln2_shift.value.data, eps)
        mlp = np.vectorize(gelu_scalar)(h2 @ w.w1.value.data) @ w.w2.value.data
        out = x1 + mlp
        if blk.adapter is not None:
            g = _route(h2, blk.adapter.gate, blk.adapter.top_k, blk.adapter.mode, len(blk.adapter.experts))
            for gi, ex in zip(g, blk.adapter.experts):
                if gi != 0.0:
                    out = out + gi * adapter_expert_loops(h2, ex)
        x = out
    cls = layer_norm_loops(x[0], model.norm_scale.value.data, model.norm_shift.value.data, eps)
    return cls @ model.head_weight.value.data + model.head_bias.value.data


def _route(h: np.ndarray, gate, k: int, mode: str, n: int) -> np.ndarray:
    if mode == "multi_experts":
        return np.ones(n)
    if mode.startswith("single_expert:"):
        g = np.zeros(n)
        g[int(mode.split(":")[1])] = 1.0
        return g
    pooled = h.mean(axis=0)
    return topk_dense(pooled @ gate.w_gate.value.data, k)

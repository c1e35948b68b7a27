"""Frozen ViT skeleton: patch embedding, multi-head self-attention, MLP and the block wiring.

Blocks are pre-norm. With LoRA deltas and the adapter delta plugged in, a block
computes

    h  = LN1(x)
    x1 = x + Attn(h; Q = hW_q + ΔQ, K = hW_k + ΔK, V = hW_v + ΔV)
    h2 = LN2(x1)
    out = x1 + MLP(h2) + AdapterDelta(h2)

Backbone weights are drawn from a truncated normal (std 0.02, cut at ±2σ),
layer norms start at scale 1 / shift 0, and everything here is frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import DimensionError
from .tensor import Parameter, Tensor, trunc_normal


def _frozen(name: str, arr: np.ndarray) -> Parameter:
    return Parameter(name, Tensor(arr), frozen=True)


@dataclass
class PatchEmbedWeights:
    weight: Parameter      # (C·P·P, D)
    cls_token: Parameter   # (D,)
    pos_embed: Parameter   # (N_t, D)

    @classmethod
    def create(cls, cfg: ModelConfig, rng: np.random.Generator) -> "PatchEmbedWeights":
        dt = cfg.dtype
        fan_in = cfg.in_channels * cfg.patch_size ** 2
        return cls(
            weight=_frozen("patch_embed.weight", trunc_normal(rng, (fan_in, cfg.embed_dim), cfg.init_std, dt)),
            cls_token=_frozen("cls_token", trunc_normal(rng, (cfg.embed_dim,), cfg.init_std, dt)),
            pos_embed=_frozen("pos_embed", trunc_normal(rng, (cfg.n_tokens, cfg.embed_dim), cfg.init_std, dt)),
        )

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.cls_token, self.pos_embed]


@dataclass
class ViTBlockWeights:
    w_q: Parameter
    w_k: Parameter
    w_v: Parameter
    w_o: Parameter
    w1: Parameter
    w2: Parameter
    ln1_scale: Parameter
    ln1_shift: Parameter
    ln2_scale: Parameter
    ln2_shift: Parameter

    @classmethod
    def create(cls, prefix: str, cfg: ModelConfig, rng: np.random.Generator) -> "ViTBlockWeights":
        d, dim, s, dt = cfg.embed_dim, cfg.dim, cfg.init_std, cfg.dtype
        p = prefix
        return cls(
            w_q=_frozen(f"{p}.attn.w_q", trunc_normal(rng, (d, dim), s, dt)),
            w_k=_frozen(f"{p}.attn.w_k", trunc_normal(rng, (d, dim), s, dt)),
            w_v=_frozen(f"{p}.attn.w_v", trunc_normal(rng, (d, dim), s, dt)),
            w_o=_frozen(f"{p}.attn.w_o", trunc_normal(rng, (dim, d), s, dt)),
            w1=_frozen(f"{p}.mlp.w1", trunc_normal(rng, (d, 4 * d), s, dt)),
            w2=_frozen(f"{p}.mlp.w2", trunc_normal(rng, (4 * d, d), s, dt)),
            ln1_scale=_frozen(f"{p}.ln1.scale", np.ones(d, dtype=dt)),
            ln1_shift=_frozen(f"{p}.ln1.shift", np.zeros(d, dtype=dt)),
            ln2_scale=_frozen(f"{p}.ln2.scale", np.ones(d, dtype=dt)),
            ln2_shift=_frozen(f"{p}.ln2.shift", np.zeros(d, dtype=dt)),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.w1, self.w2,
                self.ln1_scale, self.ln1_shift, self.ln2_scale, self.ln2_shift]


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, (H/P)·(W/P), C·P·P), patches row-major, each flattened as (c, i, j)."""
    b, c, h, w = images.shape
    g_h, g_w = h // patch, w // patch
    x = images.reshape(b, c, g_h, patch, g_w, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g_h * g_w, c * patch * patch)


def patch_embed(images, weights: PatchEmbedWeights, cfg: ModelConfig) -> Tensor:
    """Images (B, C, H, W) or (C, H, W) to token sequences (B, N_t, D), class token first."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if arr.shape[1:] != expected:
        raise DimensionError(f"patch_embed: image shape {arr.shape[1:]} does not match config {expected}")
    b = arr.shape[0]
    patches = Tensor(extract_patches(arr.astype(cfg.dtype, copy=False), cfg.patch_size))
    proj = patches @ weights.weight.value
    cls = weights.cls_token.value.reshape(1, 1, -1) + Tensor(np.zeros((b, 1, cfg.embed_dim), dtype=cfg.dtype))
    return T.concat([cls, proj], axis=1) + weights.pos_embed.value


def attention(x: Tensor, w: ViTBlockWeights, heads: int, delta_q: Tensor | None = None,
              delta_k: Tensor | None = None, delta_v: Tensor | None = None) -> Tensor:
    """Multi-head self-attention over (B, N_t, D) tokens with optional additive Q/K/V deltas."""
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
        deltas = [d.reshape((1,) + d.shape) if d is not None and d.ndim == 2 else d
                  for d in (delta_q, delta_k, delta_v)]
        return attention(x, w, heads, *deltas).reshape(x.shape[1:])
    b, n, _ = x.shape
    q, k, v = x @ w.w_q.value, x @ w.w_k.value, x @ w.w_v.value
    for name, d in (("delta_q", delta_q), ("delta_k", delta_k), ("delta_v", delta_v)):
        if d is not None and d.shape != q.shape:
            raise DimensionError(f"attention: {name} shape {d.shape} vs projection {q.shape}")
    if delta_q is not None:
        q = q + delta_q
    if delta_k is not None:
        k = k + delta_k
    if delta_v is not None:
        v = v + delta_v
    dim = q.shape[-1]
    dh = dim // heads

    def split(t):
        return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    ctx = T.softmax(scores, axis=-1) @ vh
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, n, dim)
    return ctx @ w.w_o.value


def mlp(x: Tensor, w: ViTBlockWeights) -> Tensor:
    return T.gelu(x @ w.w1.value) @ w.w2.value


def block_forward(x: Tensor, block: ViTBlockWeights, cfg: ModelConfig, lora_layer=None, adapter_layer=None,
                  training: bool = False, rng: np.random.Generator | None = None):
    """One transformer block. Returns (tokens, {"lora": decision, "adapter": decision})."""
    from .adapter_moe import moe_adapter_forward
    from .lora_moe import moe_lora_forward

    records = {}
    h = T.layer_norm(x, block.ln1_scale.value, block.ln1_shift.value, cfg.ln_eps)
    dq = dk = dv = None
    if lora_layer is not None:
        dq, dk, dv, records["lora"] = moe_lora_forward(h, lora_layer, training, rng)
    x1 = x + attention(h, block, cfg.heads, dq, dk, dv)
    h2 = T.layer_norm(x1, block.ln2_scale.value, block.ln2_shift.value, cfg.ln_eps)
    out = x1 + mlp(h2, block)
    if adapter_layer is not None:
        delta, records["adapter"] = moe_adapter_forward(h2, adapter_layer, training, rng)
        out = out + delta
    return out, records

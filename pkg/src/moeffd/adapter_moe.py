"""MoE Adapter layer: one Convpass expert per difference-convolution kind.

Each expert reshapes the patch tokens to their h×w grid and applies
1×1 down-projection → GELU → 3×3 difference conv → GELU → 1×1 up-projection,
then flattens back. The class token has no grid cell, so its row of the
adapter output is zero.

Initialisation: down and middle kernels Xavier-uniform, up-projection zero, so
a fresh layer contributes nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .diffconv import DiffConvKind, diff_conv_channels_last
from .errors import ConfigError
from .gating import GateWeights, dispatch
from .lora_moe import layer_decision
from .tensor import Parameter, Tensor


def _xavier(rng, shape, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class AdapterExpert:
    kind: DiffConvKind
    down: Parameter   # (d_mid, D)
    mid: Parameter    # (d_mid, d_mid, 3, 3)
    up: Parameter     # (D, d_mid)

    @classmethod
    def create(cls, prefix: str, kind, d: int, d_mid: int, rng: np.random.Generator, dtype
               ) -> "AdapterExpert":
        kind = DiffConvKind.parse(kind)
        down = _xavier(rng, (d_mid, d), d, d_mid, dtype)
        mid = _xavier(rng, (d_mid, d_mid, 3, 3), 9 * d_mid, 9 * d_mid, dtype)
        up = np.zeros((d, d_mid), dtype=dtype)
        return cls(
            kind=kind,
            down=Parameter(f"{prefix}.down", Tensor(down)),
            mid=Parameter(f"{prefix}.mid", Tensor(mid)),
            up=Parameter(f"{prefix}.up", Tensor(up)),
        )

    def parameters(self) -> list[Parameter]:
        return [self.down, self.mid, self.up]


@dataclass
class MoEAdapterLayer:
    experts: list[AdapterExpert]
    gate: GateWeights
    top_k: int = 1
    mode: str = "moe"

    @classmethod
    def create(cls, prefix: str, cfg: ModelConfig, rng: np.random.Generator) -> "MoEAdapterLayer":
        experts = [AdapterExpert.create(f"{prefix}.experts.{i}", kind, cfg.embed_dim, cfg.adapter_mid, rng, cfg.dtype)
                   for i, kind in enumerate(cfg.kinds)]
        gate = GateWeights.create(f"{prefix}.gate", cfg.embed_dim, len(experts), rng, cfg.dtype, cfg.init_std)
        return cls(experts=experts, gate=gate, top_k=cfg.top_k, mode=cfg.mode)

    def parameters(self) -> list[Parameter]:
        out = []
        for e in self.experts:
            out.extend(e.parameters())
        return out + self.gate.parameters()


def grid_side(n_tokens: int) -> int:
    side = math.isqrt(n_tokens - 1)
    if n_tokens < 2 or side * side != n_tokens - 1:
        raise ConfigError(f"{n_tokens} tokens: patch count {n_tokens - 1} is not a perfect square")
    return side


def tokens_to_grid(x) -> tuple[Tensor, Tensor]:
    """Split (N_t, D) tokens into the class token (D,) and a channel-first (D, h, w) grid.

    Batched input (B, N_t, D) gives (B, D) and (B, D, h, w). Token 1 + h_i·w + j
    lands at grid cell (i, j).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    side = grid_side(x.shape[-2])
    if x.ndim == 2:
        cls, grid = tokens_to_grid(x.reshape((1,) + x.shape))
        return cls.reshape(cls.shape[1:]), grid.reshape(grid.shape[1:])
    b, _, d = x.shape
    grid = x[:, 1:, :].reshape(b, side, side, d).transpose(0, 3, 1, 2)
    return x[:, 0, :], grid


def grid_to_tokens(cls: Tensor, grid: Tensor) -> Tensor:
    """Inverse of :func:`tokens_to_grid`."""
    if grid.ndim == 3:
        out = grid_to_tokens(cls.reshape((1,) + cls.shape), grid.reshape((1,) + grid.shape))
        return out.reshape(out.shape[1:])
    b, d, h, w = grid.shape
    patches = grid.transpose(0, 2, 3, 1).reshape(b, h * w, d)
    return T.concat([cls.reshape(b, 1, d), patches], axis=1)


def adapter_expert_forward(x: Tensor, expert: AdapterExpert) -> Tensor:
    """Convpass branch on (B, N_t, D) tokens; the class-token row of the result is zero."""
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    b, n, d = x.shape
    side = grid_side(n)
    grid = x[:, 1:, :].reshape(b, side, side, d)
    h = T.gelu(grid @ expert.down.value.transpose(1, 0))
    h = T.gelu(diff_conv_channels_last(h, expert.mid.value, expert.kind))
    h = (h @ expert.up.value.transpose(1, 0)).reshape(b, side * side, d)
    out = T.concat([Tensor(np.zeros((b, 1, d), dtype=x.dtype)), h], axis=1)
    return out.reshape(out.shape[1:]) if single else out


def moe_adapter_forward(x: Tensor, layer: MoEAdapterLayer, training: bool = False, rng=None):
    """Weighted sum of the routed adapter experts. Returns (delta, decision)."""
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    dec = layer_decision(x, layer.gate, len(layer.experts), layer.top_k, layer.mode, training, rng)
    (delta,) = dispatch(x, dec, lambda e, sub: (adapter_expert_forward(sub, layer.experts[e]),), 1)
    if single:
        delta = delta.reshape(delta.shape[1:])
    return delta, dec

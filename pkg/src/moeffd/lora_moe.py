"""MoE LoRA layer: N low-rank experts of distinct ranks sharing one gate.

Expert i contributes x·W_down·W_up (never materialising the D×dim product) to
each of the query, key and value projections. One routing decision per sample
selects the same expert(s) for all three projections.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, parse_mode
from .gating import GateDecision, GateWeights, dispatch, fixed_decision, route
from .tensor import Parameter, Tensor, trunc_normal

PROJECTIONS = ("q", "k", "v")


@dataclass
class LoRAExpert:
    rank: int
    down: dict[str, Parameter]   # proj -> (D, r)
    up: dict[str, Parameter]     # proj -> (r, dim)

    @classmethod
    def create(cls, prefix: str, rank: int, d: int, dim: int, rng: np.random.Generator, dtype,
               init_std: float = 0.02) -> "LoRAExpert":
        down = {p: Parameter(f"{prefix}.{p}.down", Tensor(trunc_normal(rng, (d, rank), init_std, dtype)))
                for p in PROJECTIONS}
        up = {p: Parameter(f"{prefix}.{p}.up", Tensor(np.zeros((rank, dim), dtype=dtype)))
              for p in PROJECTIONS}
        return cls(rank=rank, down=down, up=up)

    def parameters(self) -> list[Parameter]:
        return [m[p] for p in PROJECTIONS for m in (self.down, self.up)]

    def n_params(self) -> int:
        return sum(p.value.data.size for p in self.parameters())


@dataclass
class MoELoRALayer:
    experts: list[LoRAExpert]
    gate: GateWeights
    top_k: int = 1
    mode: str = "moe"

    @classmethod
    def create(cls, prefix: str, cfg: ModelConfig, rng: np.random.Generator) -> "MoELoRALayer":
        experts = [LoRAExpert.create(f"{prefix}.experts.{i}", r, cfg.embed_dim, cfg.dim, rng, cfg.dtype,
                                     cfg.init_std)
                   for i, r in enumerate(cfg.lora_ranks)]
        gate = GateWeights.create(f"{prefix}.gate", cfg.dim, len(experts), rng, cfg.dtype, cfg.init_std)
        return cls(experts=experts, gate=gate, top_k=cfg.top_k, mode=cfg.mode)

    @property
    def ranks(self) -> list[int]:
        return [e.rank for e in self.experts]

    def parameters(self) -> list[Parameter]:
        out = []
        for e in self.experts:
            out.extend(e.parameters())
        return out + self.gate.parameters()


def lora_expert_forward(x: Tensor, expert: LoRAExpert, proj: str) -> Tensor:
    """Low-rank delta x·W_down·W_up for one projection."""
    if proj not in PROJECTIONS:
        raise ValueError(f"projection must be one of {PROJECTIONS}, got {proj!r}")
    return (x @ expert.down[proj].value) @ expert.up[proj].value


def layer_decision(x: Tensor, gate: GateWeights, n_experts: int, top_k: int, mode: str,
                   training: bool, rng) -> GateDecision:
    """Routing decision for a batch of token sequences (B, N_t, dim) under the layer's mode."""
    name, ident = parse_mode(mode)
    b = x.shape[0]
    if name == "multi_experts":
        return fixed_decision(b, n_experts, range(n_experts), x.dtype)
    if name == "single_expert":
        return fixed_decision(b, n_experts, [ident], x.dtype)
    return route(T.avg_pool_tokens(x), gate, top_k, training, rng)


def moe_lora_forward(x: Tensor, layer: MoELoRALayer, training: bool = False, rng=None):
    """Gate once per sample, then sum weighted expert deltas for Q, K and V.

    Returns (delta_q, delta_k, delta_v, decision); each delta has the shape of x.
    """
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)
    dec = layer_decision(x, layer.gate, len(layer.experts), layer.top_k, layer.mode, training, rng)

    def run(e, sub):
        ex = layer.experts[e]
        return tuple(lora_expert_forward(sub, ex, p) for p in PROJECTIONS)

    dq, dk, dv = dispatch(x, dec, run, 3)
    if single:
        dq, dk, dv = (d.reshape(d.shape[1:]) for d in (dq, dk, dv))
    return dq, dk, dv, dec

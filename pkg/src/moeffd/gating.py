"""Noisy Top-k gating and the coefficient-of-variation importance loss.

Routing logits for a pooled input x_m are

    H(x) = x_m·W_gate + ε ⊙ softplus(x_m·W_noise),   ε ~ N(0, 1) per entry

with the noise term only present in training mode. The k largest entries of
H are kept (ties go to the lower expert index), softmaxed, and everything else
gets weight zero. The balancing loss for one gate over a batch X is
CV(Σ_{x∈X} G(x))², using the population standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DegenerateGateError, DimensionError
from .tensor import Parameter, Tensor, trunc_normal


@dataclass
class GateWeights:
    w_gate: Parameter
    w_noise: Parameter

    @classmethod
    def create(cls, prefix: str, dim: int, n_experts: int, rng: np.random.Generator, dtype,
               init_std: float = 0.02) -> "GateWeights":
        if n_experts < 1:
            raise ValueError("a gate needs at least one expert")
        return cls(
            w_gate=Parameter(f"{prefix}.w_gate", Tensor(trunc_normal(rng, (dim, n_experts), init_std, dtype))),
            w_noise=Parameter(f"{prefix}.w_noise", Tensor(np.zeros((dim, n_experts), dtype=dtype))),
        )

    @property
    def n_experts(self) -> int:
        return self.w_gate.value.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.w_gate, self.w_noise]


@dataclass
class GateDecision:
    """Routing record for a batch of B samples (row b belongs to sample b).

    ``weights`` stays attached to the autodiff graph so the balancing loss can
    be backpropagated into the gate.
    """

    clean_logits: np.ndarray
    noisy_logits: np.ndarray
    selected: np.ndarray
    weights: Tensor
    noise: np.ndarray | None = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return self.selected.shape[1]

    @property
    def n_experts(self) -> int:
        return self.clean_logits.shape[1]

    @property
    def top1(self) -> np.ndarray:
        return self.selected[:, 0]

    def rows_for(self, expert: int) -> np.ndarray:
        return np.nonzero((self.selected == expert).any(axis=1))[0]


def gate_logits(x_m: Tensor, gate: GateWeights, training: bool, rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None) -> tuple[Tensor, Tensor, np.ndarray | None]:
    """Clean and noisy routing logits for pooled inputs ``x_m`` of shape (B, dim) or (dim,).

    In training mode ε is drawn from ``rng`` unless given explicitly through
    ``noise``; the draw is returned so callers can replay it.
    """
    if x_m.shape[-1] != gate.w_gate.value.shape[0]:
        raise DimensionError(f"gate input width {x_m.shape[-1]} vs W_gate {gate.w_gate.value.shape}")
    single = x_m.ndim == 1
    if single:
        x_m = x_m.reshape(1, -1)
    clean = x_m @ gate.w_gate.value
    eps = None
    if training:
        if noise is None:
            if rng is None:
                raise ValueError("training-mode gating needs an rng for the noise draw")
            noise = rng.standard_normal(clean.shape).astype(clean.dtype)
        eps = np.asarray(noise, dtype=clean.dtype).reshape(clean.shape)
        noisy = clean + T.mul(T.softplus(x_m @ gate.w_noise.value), eps)
    else:
        noisy = clean
    if single:
        clean, noisy = clean.reshape(-1), noisy.reshape(-1)
    return clean, noisy, eps


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, in descending order, ties to the lower index."""
    return np.argsort(-logits, axis=-1, kind="stable")[..., :k]


def topk_gate(noisy: Tensor, k: int, clean: Tensor | None = None) -> GateDecision:
    """Softmax over the k largest logits of each row; zero weight elsewhere."""
    single = noisy.ndim == 1
    if single:
        noisy = noisy.reshape(1, -1)
        clean = clean.reshape(1, -1) if clean is not None else None
    n_e = noisy.shape[1]
    if not 1 <= k <= n_e:
        raise ValueError(f"top-k needs 1 <= k <= {n_e}, got k={k}")
    sel = topk_indices(noisy.data, k)
    kept = T.take_along(noisy, sel, axis=1)
    weights = T.put_along(T.softmax(kept, axis=1), sel, noisy.shape, axis=1)
    clean_np = (clean if clean is not None else noisy).data
    return GateDecision(clean_logits=clean_np.copy(), noisy_logits=noisy.data.copy(), selected=sel, weights=weights)


def route(x_m: Tensor, gate: GateWeights, k: int, training: bool, rng=None) -> GateDecision:
    clean, noisy, eps = gate_logits(x_m, gate, training, rng)
    dec = topk_gate(noisy, k, clean)
    dec.noise = eps
    return dec


def fixed_decision(batch: int, n_experts: int, experts, dtype) -> GateDecision:
    """Gate-free routing with weight 1 on every listed expert (multi-expert / single-expert modes)."""
    experts = np.asarray(experts, dtype=np.int64)
    sel = np.broadcast_to(experts, (batch, experts.size)).copy()
    w = np.zeros((batch, n_experts), dtype=dtype)
    w[:, experts] = 1.0
    zeros = np.zeros((batch, n_experts), dtype=dtype)
    return GateDecision(clean_logits=zeros, noisy_logits=zeros, selected=sel, weights=Tensor(w))


def importance(decisions) -> Tensor:
    """Sum of gate weight vectors over a batch.

    Accepts one batched :class:`GateDecision`, a list of them (rows are
    concatenated), or a raw (B, N_e) tensor.
    """
    if isinstance(decisions, GateDecision):
        w = decisions.weights
    elif isinstance(decisions, Tensor):
        w = decisions
    else:
        decisions = list(decisions)
        if not decisions:
            raise ValueError("importance of an empty batch is undefined")
        w = T.concat([d.weights for d in decisions], axis=0)
    if w.shape[0] == 0:
        raise ValueError("importance of an empty batch is undefined")
    return w.sum(axis=0)


def moe_loss(imp) -> Tensor:
    """Squared coefficient of variation (population std / mean)² of an importance vector."""
    imp = imp if isinstance(imp, Tensor) else Tensor(imp)
    mu = imp.mean()
    if not float(mu.data) > 0.0:
        raise DegenerateGateError(f"importance has non-positive mean {float(mu.data)!r}")
    # shifting by the first entry makes a constant vector give exactly 0
    centred = imp - imp.reshape(-1)[0]
    var = T.square(centred).mean() - T.square(centred.mean())
    return var / T.square(mu)


def dispatch(x: Tensor, decision: GateDecision, expert_fn, n_out: int = 1) -> list[Tensor | None]:
    """Run each expert only on the rows routed to it and combine weighted outputs.

    ``expert_fn(e, rows_x)`` returns a tuple of ``n_out`` tensors whose leading
    axis matches ``rows_x``. Row b of result i is Σ_e G_{b,e}·expert_e(x_b)[i]
    over the experts selected for b; unselected experts are never evaluated.
    """
    b = x.shape[0]
    totals: list[Tensor | None] = [None] * n_out
    for e in range(decision.n_experts):
        rows = decision.rows_for(e)
        if rows.size == 0:
            continue
        full = rows.size == b
        sub = x if full else x[rows]
        outs = expert_fn(e, sub)
        wcol = decision.weights[:, e] if full else decision.weights[rows, e]
        wcol = wcol.reshape((-1,) + (1,) * (sub.ndim - 1))
        for i, o in enumerate(outs):
            o = o * wcol
            if not full:
                o = T.scatter_rows(o, rows, b)
            totals[i] = o if totals[i] is None else totals[i] + o
    return totals

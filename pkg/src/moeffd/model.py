"""Full MoE-FFD assembly, composite loss, optimizer and training loop."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .adapter_moe import MoEAdapterLayer
from .backbone import PatchEmbedWeights, ViTBlockWeights, block_forward, patch_embed
from .config import ModelConfig, RunConfig, TrainConfig, parse_mode
from .data import Dataset
from .errors import CheckpointError, ConfigError, NumericError
from .gating import GateDecision, importance, moe_loss
from .lora_moe import MoELoRALayer
from .tensor import Parameter, Tensor, trunc_normal

log = logging.getLogger(__name__)

GATE_TYPES = ("lora", "adapter")

# independent RNG stream ids
_BACKBONE, _EXPERTS, _HEAD = 0, 1, 2
_SHUFFLE, _NOISE = 10, 11


def stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), tag])


@dataclass
class Block:
    weights: ViTBlockWeights
    lora: MoELoRALayer | None
    adapter: MoEAdapterLayer | None


@dataclass
class MoEFFDModel:
    cfg: ModelConfig
    embed: PatchEmbedWeights
    blocks: list[Block]
    norm_scale: Parameter   # final frozen layer norm on the class token, as in a standard ViT
    norm_shift: Parameter
    head_weight: Parameter
    head_bias: Parameter

    @classmethod
    def build(cls, cfg: ModelConfig) -> "MoEFFDModel":
        """Construct a model; backbone, expert and head weights use separate seeded streams."""
        rb, re, rh = stream(cfg.seed, _BACKBONE), stream(cfg.seed, _EXPERTS), stream(cfg.seed, _HEAD)
        mode, _ = parse_mode(cfg.mode)
        embed = PatchEmbedWeights.create(cfg, rb)
        blocks = []
        for i in range(cfg.depth):
            w = ViTBlockWeights.create(f"blocks.{i}", cfg, rb)
            lora = adapter = None
            if mode != "backbone_only":
                if cfg.lora:
                    lora = MoELoRALayer.create(f"blocks.{i}.lora", cfg, re)
                if cfg.adapter:
                    adapter = MoEAdapterLayer.create(f"blocks.{i}.adapter", cfg, re)
            blocks.append(Block(w, lora, adapter))
        d, dt = cfg.embed_dim, cfg.dtype
        norm_scale = Parameter("norm.scale", Tensor(np.ones(d, dtype=dt)), frozen=True)
        norm_shift = Parameter("norm.shift", Tensor(np.zeros(d, dtype=dt)), frozen=True)
        head_w = Parameter("head.weight", Tensor(trunc_normal(rh, (cfg.embed_dim, 2), cfg.init_std, cfg.dtype)))
        head_b = Parameter("head.bias", Tensor(np.zeros(2, dtype=cfg.dtype)))
        return cls(cfg, embed, blocks, norm_scale, norm_shift, head_w, head_b)

    def parameters(self) -> list[Parameter]:
        out = list(self.embed.parameters())
        for b in self.blocks:
            out.extend(b.weights.parameters())
            if b.lora is not None:
                out.extend(b.lora.parameters())
            if b.adapter is not None:
                out.extend(b.adapter.parameters())
        return out + [self.norm_scale, self.norm_shift, self.head_weight, self.head_bias]

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ConfigError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise CheckpointError(f"checkpoint is missing tensors: {', '.join(missing[:5])}")
        for name, p in params.items():
            arr = state[name]
            if arr.shape != p.value.shape:
                raise CheckpointError(f"tensor {name}: shape {arr.shape} vs model {p.value.shape}")
            p.value.data = np.array(arr, dtype=p.value.dtype)


def model_forward(images, model: MoEFFDModel, training: bool = False, rng: np.random.Generator | None = None,
                  return_tokens: bool = False):
    """Logits (B, 2) from the final class token, plus per-block gate decisions.

    ``return_tokens`` also returns the final (B, N_t, D) token sequence.
    """
    cfg = model.cfg
    x = patch_embed(images, model.embed, cfg)
    records: list[dict[str, GateDecision]] = []
    for blk in model.blocks:
        x, rec = block_forward(x, blk.weights, cfg, blk.lora, blk.adapter, training, rng)
        records.append(rec)
    cls = T.layer_norm(x[:, 0, :], model.norm_scale.value, model.norm_shift.value, cfg.ln_eps)
    logits = cls @ model.head_weight.value + model.head_bias.value
    if return_tokens:
        return logits, records, x
    return logits, records


def routed_decisions(records) -> list[GateDecision]:
    """Decisions that came from a learned gate (fixed multi/single-expert routing is skipped)."""
    out = []
    for rec in records:
        for gt in GATE_TYPES:
            dec = rec.get(gt)
            if dec is not None and dec.weights.requires_grad:
                out.append(dec)
    return out


def loss_terms(logits: Tensor, labels, records) -> tuple[Tensor, Tensor | None]:
    """(mean cross-entropy, Σ over gates of CV² of batch importance or None without gates)."""
    labels = np.asarray(labels)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 (real) or 1 (fake)")
    ce = T.cross_entropy(logits, labels)
    total = None
    for dec in routed_decisions(records):
        term = moe_loss(importance(dec))
        total = term if total is None else total + term
    return ce, total


def total_loss(logits: Tensor, labels, records, lam: float) -> Tensor:
    """L = L_ce + λ·Σ_gates CV(Importance)²."""
    ce, moe = loss_terms(logits, labels, records)
    if lam == 0 or moe is None:
        return ce
    return ce + moe * float(lam)


def freeze_partition(model: MoEFFDModel) -> tuple[list[Parameter], list[Parameter]]:
    params = model.parameters()
    return [p for p in params if not p.frozen], [p for p in params if p.frozen]


def is_gate_param(name: str) -> bool:
    return name.endswith(".w_gate") or name.endswith(".w_noise")


def count_params(model: MoEFFDModel) -> dict[str, int]:
    trainable, frozen = freeze_partition(model)
    size = lambda ps: int(sum(p.value.data.size for p in ps))
    return {"trainable": size(trainable), "frozen": size(frozen), "total": size(trainable) + size(frozen),
            "gate": size([p for p in trainable if is_gate_param(p.name)])}


def closed_form_trainable(cfg: ModelConfig) -> int:
    """Trainable parameter count predicted from the config alone."""
    d, dim, m = cfg.embed_dim, cfg.dim, cfg.adapter_mid
    head = 2 * d + 2
    if parse_mode(cfg.mode)[0] == "backbone_only":
        return head
    per_block = 0
    if cfg.lora:
        n = len(cfg.lora_ranks)
        per_block += sum(3 * r * (d + dim) for r in cfg.lora_ranks) + 2 * dim * n
    if cfg.adapter:
        n = len(cfg.adapter_kinds)
        per_block += n * (m * d * 2 + m * m * 9) + 2 * d * n
    return cfg.depth * per_block + head


def frozen_digests(model: MoEFFDModel) -> dict[str, str]:
    return {p.name: ckpt.tensor_digest(p.value.data) for p in model.parameters() if p.frozen}


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class Adam:
    """Bias-corrected Adam with two learning-rate groups (gates vs everything else)."""

    lr_gate: float
    lr_other: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        return self.lr_gate if is_gate_param(name) else self.lr_other

    def step(self, params: list[Parameter]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in params:
            if p.frozen:
                continue
            g = p.value.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {p.name}")
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.value.data)
                self.v[p.name] = np.zeros_like(p.value.data)
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr_for(p.name) * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value.data = (p.value.data - update).astype(p.value.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load(self, tensors: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k[len("adam.m."):]: np.array(v) for k, v in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: np.array(v) for k, v in tensors.items() if k.startswith("adam.v.")}


def adam_step(params: list[Parameter], state: Adam) -> None:
    state.step(params)


# ---------------------------------------------------------------------------
# evaluation and training
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    scores: np.ndarray                       # P(fake) per sample
    labels: np.ndarray
    top1: dict[tuple[int, str], np.ndarray]  # (block, gate type) -> Top-1 expert per sample
    n_experts: dict[tuple[int, str], int]


def predict(model: MoEFFDModel, ds: Dataset, batch_size: int = 100) -> Prediction:
    """Noise-free scoring of a dataset; also collects Top-1 routing per gate."""
    scores = []
    top1: dict[tuple[int, str], list[np.ndarray]] = {}
    n_exp: dict[tuple[int, str], int] = {}
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            logits, records = model_forward(ds.images[start:start + batch_size], model, training=False)
            scores.append(T.softmax(logits, axis=-1).data[:, 1].astype(np.float64))
            for b, rec in enumerate(records):
                for gt, dec in rec.items():
                    top1.setdefault((b, gt), []).append(dec.top1)
                    n_exp[(b, gt)] = dec.n_experts
    scores = np.concatenate(scores) if scores else np.zeros(0)
    if not np.isfinite(scores).all():
        raise NumericError(f"model produced {int((~np.isfinite(scores)).sum())} non-finite scores")
    return Prediction(scores, ds.labels.copy(),
                      {k: np.concatenate(v) for k, v in top1.items()}, n_exp)


@dataclass
class TrainReport:
    epochs: list[dict[str, Any]] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    expert_counts: dict[str, list[int]] = field(default_factory=dict)
    seconds: float = 0.0


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


def checkpoint_meta(model: MoEFFDModel, run_cfg: RunConfig | None, epoch: int, opt: Adam,
                    shuffle: np.random.Generator, noise: np.random.Generator, report: TrainReport) -> dict:
    return {
        "model_config": model.cfg.to_dict(),
        "run_config": run_cfg.to_dict() if run_cfg is not None else None,
        "epoch": epoch,
        "adam_t": opt.t,
        "rng": {"shuffle": _rng_state(shuffle), "noise": _rng_state(noise)},
        "report": {"epochs": report.epochs, "batch_losses": report.batch_losses},
    }


def save_checkpoint(path, model: MoEFFDModel, opt: Adam | None = None, meta: dict | None = None) -> Path:
    tensors = model.state_dict()
    if opt is not None:
        tensors.update(opt.state())
    meta = dict(meta or {})
    meta.setdefault("model_config", model.cfg.to_dict())
    return ckpt.save(path, tensors, meta)


def load_model(path) -> tuple[MoEFFDModel, dict[str, np.ndarray], dict]:
    tensors, meta = ckpt.load(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no model config")
    model = MoEFFDModel.build(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict(tensors)
    return model, tensors, meta


def train(model: MoEFFDModel, train_set: Dataset, cfg: TrainConfig, test_set: Dataset | None = None,
          run_dir=None, run_cfg: RunConfig | None = None, resume: str | Path | None = None,
          max_steps: int | None = None, on_epoch=None) -> TrainReport:
    """Minimise L_ce + λ·L_moe over the trainable partition with Adam.

    Deterministic for fixed seeds: the shuffle stream and the gate-noise stream
    are seeded from ``cfg.seed``, initialisation from the model config. With
    ``run_dir`` set, checkpoints ``epoch_XXX.mffd`` are written every
    ``cfg.checkpoint_every`` epochs; ``resume`` continues from one of them.
    """
    from .metrics import auc, eer

    if len(train_set) == 0 or len(set(train_set.labels.tolist())) < 2:
        raise ConfigError("training needs a non-empty dataset with both classes present")
    shuffle_rng, noise_rng = stream(cfg.seed, _SHUFFLE), stream(cfg.seed, _NOISE)
    opt = Adam(cfg.lr_gate, cfg.lr_other, cfg.beta1, cfg.beta2, cfg.adam_eps)
    report = TrainReport()
    start_epoch = 0
    run_dir = Path(run_dir) if run_dir is not None else None
    if resume is not None:
        tensors, meta = ckpt.load(resume)
        model.load_state_dict(tensors)
        opt.load(tensors, meta["adam_t"])
        _set_rng_state(shuffle_rng, meta["rng"]["shuffle"])
        _set_rng_state(noise_rng, meta["rng"]["noise"])
        report.epochs = list(meta["report"]["epochs"])
        report.batch_losses = list(meta["report"]["batch_losses"])
        start_epoch = meta["epoch"]

    trainable, _ = freeze_partition(model)
    lam = float(cfg.lambda_moe)
    n = len(train_set)
    steps = 0
    t0 = time.perf_counter()

    def snapshot(name: str, epoch: int) -> Path | None:
        if run_dir is None:
            return None
        meta = checkpoint_meta(model, run_cfg, epoch, opt, shuffle_rng, noise_rng, report)
        return save_checkpoint(run_dir / name, model, opt, meta)

    if run_dir is not None and start_epoch == 0:
        snapshot("epoch_000.mffd", 0)

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        sums = {"loss": 0.0, "ce": 0.0, "moe": 0.0}
        counts = {}
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            logits, records = model_forward(train_set.images[idx], model, training=True, rng=noise_rng)
            ce, moe = loss_terms(logits, train_set.labels[idx], records)
            loss = ce if (lam == 0 or moe is None) else ce + moe * lam
            value = float(loss.data)
            if not np.isfinite(value):
                path = snapshot("nan_snapshot.mffd", epoch)
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {n_batches}"
                                   + (f"; state saved to {path}" if path else ""))
            for p in trainable:
                p.value.grad = None
            loss.backward()
            opt.step(trainable)
            report.batch_losses.append(value)
            sums["loss"] += value
            sums["ce"] += float(ce.data)
            sums["moe"] += float(moe.data) if moe is not None else 0.0
            for b, rec in enumerate(records):
                for gt, dec in rec.items():
                    key = f"{b}:{gt}"
                    c = counts.setdefault(key, np.zeros(dec.n_experts, dtype=np.int64))
                    c += np.bincount(dec.top1, minlength=dec.n_experts)
            n_batches += 1
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        row = {"epoch": epoch, "loss": sums["loss"] / n_batches, "ce": sums["ce"] / n_batches,
               "moe": sums["moe"] / n_batches}
        row["moe_share"] = lam * row["moe"] / row["loss"] if row["loss"] > 0 else 0.0
        row["train_top1"] = {k: v.tolist() for k, v in counts.items()}
        if test_set is not None and len(test_set) and cfg.eval_every and epoch % cfg.eval_every == 0:
            pred = predict(model, test_set)
            if len(set(pred.labels.tolist())) == 2:
                row["test_auc"] = auc(pred.scores, pred.labels)
                row["test_eer"] = eer(pred.scores, pred.labels)
        row["seconds"] = time.perf_counter() - t0
        report.epochs.append(row)
        log.info("epoch %d loss %.4f ce %.4f moe %.4f auc %s", epoch, row["loss"], row["ce"], row["moe"],
                 row.get("test_auc"))
        if on_epoch is not None:
            on_epoch(row)
        if max_steps is not None and steps >= max_steps:
            break
        if run_dir is not None and cfg.checkpoint_every and (epoch % cfg.checkpoint_every == 0
                                                             or epoch == cfg.epochs):
            snapshot(f"epoch_{epoch:03d}.mffd", epoch)
    report.seconds = time.perf_counter() - t0
    return report


def param_hash(model: MoEFFDModel) -> str:
    h = hashlib.sha256()
    for p in model.parameters():
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value.data).tobytes())
    return h.hexdigest()

"""Matplotlib figures written next to the CSV outputs (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def loss_curves(epochs: list[dict], path) -> Path:
    """Per-epoch total loss, cross-entropy and λ-free MoE term; held-out AUC on a twin axis."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ep = [r["epoch"] for r in epochs]
    for key, style in (("loss", "-"), ("ce", "--"), ("moe", ":")):
        ax.plot(ep, [r[key] for r in epochs], style, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if any("test_auc" in r for r in epochs):
        ax2 = ax.twinx()
        pts = [(r["epoch"], r["test_auc"]) for r in epochs if "test_auc" in r]
        ax2.plot(*zip(*pts), "o-", color="tab:red", label="test AUC")
        ax2.set_ylabel("AUC")
        ax2.set_ylim(0.0, 1.0)
        ax2.legend(loc="lower right")
    ax.legend(loc="upper right")
    return _save(fig, path)


def robustness_curves(rows: list[dict], path) -> Path:
    """AUC against severity, one line per perturbation kind. rows: kind, severity, auc."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in sorted({r["kind"] for r in rows}):
        pts = sorted((r["severity"], r["auc"]) for r in rows if r["kind"] == kind)
        ax.plot(*zip(*pts), "o-", label=kind)
    ax.set_xlabel("severity")
    ax.set_ylabel("AUC")
    ax.set_xticks(range(0, 6))
    ax.legend()
    return _save(fig, path)


def expert_frequency_bars(counts: dict[tuple[int, str], np.ndarray], path, gate_type: str = "lora",
                          labels: list[str] | None = None) -> Path:
    """Grouped bars of Top-1 selection share per expert, one group per block."""
    keys = sorted(k for k in counts if k[1] == gate_type)
    fig, ax = plt.subplots(figsize=(7, 4))
    if keys:
        n_e = len(counts[keys[0]])
        width = 0.8 / n_e
        x = np.arange(len(keys))
        for e in range(n_e):
            share = [counts[k][e] / max(1, counts[k].sum()) for k in keys]
            ax.bar(x + e * width, share, width, label=labels[e] if labels else f"expert {e}")
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels([f"block {k[0]}" for k in keys])
        ax.legend(fontsize=8)
    ax.set_ylabel("Top-1 share")
    ax.set_title(f"{gate_type} gate selection frequency")
    return _save(fig, path)


def ablation_bars(rows: list[dict], path, key: str = "cell", metric: str = "auc") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ok = [r for r in rows if r.get(metric) not in (None, "")]
    ax.bar([str(r[key]) for r in ok], [float(r[metric]) for r in ok])
    ax.set_ylabel(metric)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel(key)
    return _save(fig, path)

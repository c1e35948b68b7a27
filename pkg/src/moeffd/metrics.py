"""AUC, EER and expert-selection-frequency reporting.

EER is the error rate at the operating point where the false positive rate
equals the false negative rate (the standard definition). Scores are the
probability of the "fake" class; a sample is predicted fake when its score is
at or above the threshold.

CSV schemas:

    metrics.csv       run_id, split, auc, eer
    expert_freq.csv   block, gate_type, expert_index, count
    gate_records.csv  sample_id, block, gate_type, top1
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if (y == 1).sum() == 0 or (y == 0).sum() == 0:
        raise ValueError("AUC/EER need at least one sample of each class")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_fake > score_real) + 0.5·P(tie)."""
    s, y = _check(scores, labels)
    # midranks give the tie credit of 0.5 exactly
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    _, first, counts = np.unique(sorted_s, return_index=True, return_counts=True)
    mid = first + (counts + 1) / 2.0
    ranks[order] = np.repeat(mid, counts)
    n_pos = int((y == 1).sum())
    n_neg = s.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, FPR, FNR) for every distinct score plus +inf (predict nothing fake)."""
    s, y = _check(scores, labels)
    thr = np.concatenate([np.unique(s), [np.inf]])
    pos = np.sort(s[y == 1])
    neg = np.sort(s[y == 0])
    # number of scores >= t
    pos_ge = pos.size - np.searchsorted(pos, thr, side="left")
    neg_ge = neg.size - np.searchsorted(neg, thr, side="left")
    fpr = neg_ge / neg.size
    fnr = 1.0 - pos_ge / pos.size
    return thr, fpr, fnr


def eer(scores, labels) -> float:
    """(FPR + FNR) / 2 at the threshold minimising |FPR − FNR| (ties: the smaller mean)."""
    s, y = _check(scores, labels)
    thr = np.concatenate([np.unique(s), [np.inf]])
    pos, neg = np.sort(s[y == 1]), np.sort(s[y == 0])
    # integer counts scaled by n_pos·n_neg so ties are compared exactly
    fp = (neg.size - np.searchsorted(neg, thr, side="left")) * pos.size
    fn = np.searchsorted(pos, thr, side="left") * neg.size
    best = np.lexsort((fp + fn, np.abs(fp - fn)))[0]
    return float((fp[best] + fn[best]) / (2 * pos.size * neg.size))


@dataclass
class ExpertFrequencyReport:
    """Top-1 counts keyed by (block, gate type)."""

    counts: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)

    def rows(self) -> list[tuple[int, str, int, int]]:
        out = []
        for (block, gate_type) in sorted(self.counts):
            for i, c in enumerate(self.counts[(block, gate_type)]):
                out.append((block, gate_type, i, int(c)))
        return out

    def shares(self, gate_type: str | None = None) -> dict[tuple[int, str], np.ndarray]:
        return {k: v / max(1, v.sum()) for k, v in self.counts.items() if gate_type in (None, k[1])}

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "gate_type", "expert_index", "count"])
            w.writerows(self.rows())
        return path

    @classmethod
    def read_csv(cls, path) -> "ExpertFrequencyReport":
        counts: dict[tuple[int, str], dict[int, int]] = {}
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                key = (int(row["block"]), row["gate_type"])
                counts.setdefault(key, {})[int(row["expert_index"])] = int(row["count"])
        return cls({k: np.array([v[i] for i in range(len(v))], dtype=np.int64) for k, v in counts.items()})


def expert_frequencies(top1: dict[tuple[int, str], np.ndarray], n_experts: dict[tuple[int, str], int]
                       ) -> ExpertFrequencyReport:
    """Count Top-1 selections per gate from per-sample routing records."""
    return ExpertFrequencyReport({k: np.bincount(np.asarray(v, dtype=np.int64), minlength=n_experts[k])
                                  for k, v in top1.items()})


def collapse_ratio(report: ExpertFrequencyReport, gate_type: str = "lora", smoothing: float = 1.0) -> float:
    """Mean over gates of max/min Top-1 count, with additive smoothing so unused experts stay finite."""
    ratios = [(c.max() + smoothing) / (c.min() + smoothing)
              for k, c in report.counts.items() if k[1] == gate_type]
    if not ratios:
        raise ValueError(f"no {gate_type} gates in the report")
    return float(np.mean(ratios))


def write_metrics_csv(path, rows) -> Path:
    """rows: iterable of dicts with run_id, split, auc, eer."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "split", "auc", "eer"])
        for r in rows:
            w.writerow([r["run_id"], r["split"], repr(float(r["auc"])), repr(float(r["eer"]))])
    return path


def read_metrics_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return [{"run_id": r["run_id"], "split": r["split"], "auc": float(r["auc"]), "eer": float(r["eer"])}
                for r in csv.DictReader(fh)]


def write_gate_records(path, ids, top1: dict[tuple[int, str], np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "block", "gate_type", "top1"])
        for (block, gate_type) in sorted(top1):
            for sid, e in zip(ids, top1[(block, gate_type)]):
                w.writerow([sid, block, gate_type, int(e)])
    return path


def read_gate_records(path) -> tuple[dict[tuple[int, str], np.ndarray], list[str]]:
    top1: dict[tuple[int, str], list[int]] = {}
    ids: list[str] = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["block"]), row["gate_type"])
            top1.setdefault(key, []).append(int(row["top1"]))
            if len(top1) == 1:
                ids.append(row["sample_id"])
    return {k: np.array(v, dtype=np.int64) for k, v in top1.items()}, ids

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moeffd.metrics import (ExpertFrequencyReport, auc, collapse_ratio, eer, expert_frequencies,
                            read_gate_records, read_metrics_csv, roc_points, write_gate_records,
                            write_metrics_csv)
from moeffd.oracles import auc_pairs, eer_exhaustive


def test_auc_examples():
    assert auc([0.1, 0.9], [0, 1]) == 1.0
    assert auc([0.9, 0.1], [0, 1]) == 0.0
    assert auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_eer_examples():
    assert eer([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 0.0
    assert eer([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 1.0
    assert eer([0.5, 0.5], [0, 1]) == 0.5


def test_input_validation():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auc([0.1], [0, 1])
    with pytest.raises(ValueError):
        eer([np.nan, 0.2], [0, 1])
    with pytest.raises(ValueError):
        eer([0.1, 0.2], [0, 2])


def _batch(rng):
    n = int(rng.integers(2, 60))
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    # coarse scores create plenty of ties
    s = rng.integers(0, 8, n) / 7.0 if rng.uniform() < 0.5 else rng.uniform(size=n)
    return s, y


def test_match_oracles_on_random_batches():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s, y = _batch(rng)
        assert auc(s, y) == auc_pairs(s, y)
        assert eer(s, y) == eer_exhaustive(s.tolist(), y.tolist())


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=30))
def test_auc_invariant_to_monotone_transform(pairs):
    s = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        return
    assert auc(s, y) == auc(np.exp(3 * s) - 2, y)
    assert auc(s, y) + auc(-s, y) == pytest.approx(1.0, abs=1e-12)


def test_roc_points_endpoints():
    thr, fpr, fnr = roc_points([0.2, 0.4, 0.6], [0, 1, 1])
    assert thr[-1] == np.inf and fpr[-1] == 0.0 and fnr[-1] == 1.0
    assert fpr[0] == 1.0 and fnr[0] == 0.0


def test_expert_frequencies_and_collapse():
    top1 = {(0, "lora"): np.array([0, 0, 0, 1]), (0, "adapter"): np.array([4, 4, 2, 0])}
    rep = expert_frequencies(top1, {(0, "lora"): 3, (0, "adapter"): 5})
    np.testing.assert_array_equal(rep.counts[(0, "lora")], [3, 1, 0])
    np.testing.assert_array_equal(rep.counts[(0, "adapter")], [1, 0, 1, 0, 2])
    assert collapse_ratio(rep, "lora") == 4.0
    assert collapse_ratio(rep, "lora", smoothing=0.5) == 3.5 / 0.5
    even = ExpertFrequencyReport({(0, "lora"): np.array([5, 5, 5])})
    assert collapse_ratio(even) == 1.0
    with pytest.raises(ValueError):
        collapse_ratio(even, "adapter")
    s = rep.shares("lora")
    assert list(s) == [(0, "lora")] and s[(0, "lora")].sum() == 1.0


def test_csv_round_trips(tmp_path):
    rep = ExpertFrequencyReport({(1, "adapter"): np.array([2, 0, 7, 1, 0]), (0, "lora"): np.array([1, 2, 3])})
    back = ExpertFrequencyReport.read_csv(rep.write_csv(tmp_path / "f.csv"))
    assert back.rows() == rep.rows()
    rows = [{"run_id": "r", "split": "test", "auc": 0.1 + 0.2, "eer": 1 / 3}]
    assert read_metrics_csv(write_metrics_csv(tmp_path / "m.csv", rows)) == rows
    top1 = {(0, "lora"): np.array([2, 0]), (0, "adapter"): np.array([1, 4])}
    got, ids = read_gate_records(write_gate_records(tmp_path / "g.csv", ["a", "b"], top1))
    assert ids == ["a", "b"]
    assert {k: v.tolist() for k, v in got.items()} == {k: v.tolist() for k, v in top1.items()}

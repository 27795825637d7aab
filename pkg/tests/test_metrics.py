import time

import numpy as np
import pytest
import torch

from wscat.attacks import AttackSpec
from wscat.exceptions import AttackError, ContractError
from wscat.metrics import EpochStats, MetricsRecord, accuracy, harmonic_mean, read_jsonl, robust_accuracy


def test_harmonic_mean_reference_column():
    assert harmonic_mean([80.93, 59.62, 58.52, 53.15, 52.23]) == pytest.approx(59.40, abs=0.01)


@pytest.mark.parametrize("values,expected", [([0.5, 0.5], 0.5), ([1.0, 0.25], 0.4), ([7.0], 7.0)])
def test_harmonic_mean_values(values, expected):
    assert harmonic_mean(values) == pytest.approx(expected)


def test_harmonic_mean_zero_and_errors():
    flag = []
    assert harmonic_mean([0.9, 0.0], flag) == 0.0 and flag == ["zero-input"]
    with pytest.raises(ContractError):
        harmonic_mean([])
    with pytest.raises(ContractError):
        harmonic_mean([0.5, -0.1])


class ConstantModel(torch.nn.Module):
    def __init__(self, k, n_classes=10):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1))
        self.k, self.n = k, n_classes

    def logits(self, x):
        out = torch.zeros(len(x), self.n)
        out[:, self.k] = 1.0
        return out + self.w


def test_constant_predictor_accuracy():
    y = np.repeat(np.arange(10), 5)
    assert accuracy(ConstantModel(3), np.zeros((50, 2), np.float32), y) == pytest.approx(0.1)


def test_identity_adapter_equals_natural(mlp, unit_batch):
    y = np.random.default_rng(0).integers(0, 3, 10)

    def identity(clf, x, yb):
        return x

    identity.eps = 0.0
    assert robust_accuracy(mlp, unit_batch, y, identity) == accuracy(mlp, unit_batch, y)


def test_adapter_without_budget_rejected(mlp, unit_batch):
    with pytest.raises(ContractError):
        robust_accuracy(mlp, unit_batch, np.zeros(10), lambda c, x, y: x)


def test_infeasible_adapter_is_named(mlp, unit_batch):
    def cheat(clf, x, y):
        return (x + 0.5).clamp(0, 1)

    cheat.eps = 0.01
    with pytest.raises(AttackError, match="cheat"):
        robust_accuracy(mlp, unit_batch, np.zeros(10), cheat)


def test_robust_not_above_natural(mlp, unit_batch):
    y = mlp.logits(unit_batch).argmax(-1).numpy()
    spec = AttackSpec(eps=0.1, alpha=0.05, steps=5)
    assert robust_accuracy(mlp, unit_batch, y, spec) <= accuracy(mlp, unit_batch, y)


def test_jsonl_stream(tmp_path):
    rec = MetricsRecord("r1", "abc")
    rec.add_epoch(EpochStats(0, 1.0, 0.5, 0.9, 0.4, 0.55, 0.1, wall_time=3.0))
    rec.final = {"natural": 0.9}
    rec.harmonic = 0.5
    rec.write_jsonl(tmp_path / "m.jsonl")
    rows = read_jsonl(tmp_path / "m.jsonl")
    assert {"run_id", "epoch", "metric", "value", "config_hash", "timestamp"} <= set(rows[0])
    metrics = {r["metric"] for r in rows}
    assert "a1" in metrics and "wall_time" not in metrics and "final.harmonic_mean" in metrics

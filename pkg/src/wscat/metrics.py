"""Accuracy metrics, the harmonic-mean summary, and the metrics record stream."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .attacks import AttackSpec, check_feasible, run_attack
from .exceptions import ContractError

log = logging.getLogger(__name__)


def harmonic_mean(values, flag: list | None = None) -> float:
    """``n / sum(1 / v_i)``; unit-preserving (percentages in, percentages out).

    Any zero entry makes the result 0; if ``flag`` is a list, a note is appended.
    """
    values = [float(v) for v in values]
    if not values:
        raise ContractError("harmonic mean of an empty list")
    if any(v < 0 for v in values):
        raise ContractError("harmonic mean needs non-negative values")
    if any(v == 0 for v in values):
        if flag is not None:
            flag.append("zero-input")
        return 0.0
    return len(values) / sum(1.0 / v for v in values)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _batches(n, size):
    for start in range(0, n, size):
        yield slice(start, start + size)


def predict(classifier, x, batch_size: int = 512) -> np.ndarray:
    x = torch.as_tensor(x)
    dtype = next(classifier.parameters()).dtype
    out = []
    with torch.no_grad():
        for sl in _batches(len(x), batch_size):
            out.append(classifier.logits(x[sl].to(dtype)).argmax(-1))
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


def accuracy(classifier, x, y, batch_size: int = 512) -> float:
    """Fraction of argmax-correct predictions."""
    if len(x) == 0:
        raise ContractError("accuracy of an empty split")
    return float((predict(classifier, x, batch_size) == np.asarray(y)).mean())


def robust_accuracy(classifier, x, y, attack: AttackSpec | Callable, *, seed: int = 0,
                    batch_size: int = 256, name: str | None = None, return_adv: bool = False):
    """Accuracy on attacked inputs.

    ``attack`` is an :class:`AttackSpec` or an external adapter
    ``(classifier, x, y) -> x_adv``; adapters must declare their budget as an
    ``eps`` attribute. Every attacked batch is checked against the ball.
    """
    if len(x) == 0:
        raise ContractError("robust accuracy of an empty split")
    dtype = next(classifier.parameters()).dtype
    x = torch.as_tensor(x).to(dtype)
    y = torch.as_tensor(np.asarray(y), dtype=torch.long)
    if isinstance(attack, AttackSpec):
        eps, label = attack.eps, name or attack.family
        gen = torch.Generator().manual_seed(seed)

        def fn(clf, xb, yb):
            return run_attack(clf, xb, yb, attack, gen)
    else:
        eps = getattr(attack, "eps", None)
        if eps is None:
            raise ContractError("external attack adapters must expose an `eps` attribute")
        label = name or getattr(attack, "__name__", attack.__class__.__name__)
        fn = attack
    correct, advs = 0, []
    for sl in _batches(len(x), batch_size):
        xb, yb = x[sl], y[sl]
        x_adv = torch.as_tensor(fn(classifier, xb, yb)).to(dtype)
        check_feasible(x_adv, xb, eps, name=label)
        with torch.no_grad():
            correct += int((classifier.logits(x_adv).argmax(-1) == yb).sum())
        if return_adv:
            advs.append(x_adv)
    acc = correct / len(x)
    return (acc, torch.cat(advs)) if return_adv else acc


@dataclass
class EpochStats:
    epoch: int
    a1: float
    a2: float
    val_natural: float
    val_pgd: float
    harmonic: float
    lr: float
    wall_time: float = 0.0
    bound_checked: int = 0
    bound_violations: int = 0
    delta_mean: float = 0.0

    def metrics(self) -> dict:
        """Deterministic metrics only (wall time is excluded)."""
        d = asdict(self)
        d.pop("epoch")
        d.pop("wall_time")
        return d


@dataclass
class MetricsRecord:
    run_id: str
    config_hash: str
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    harmonic: float | None = None
    best_epoch: int | None = None
    histograms: dict = field(default_factory=dict)
    rho_gamma: dict = field(default_factory=dict)

    def add_epoch(self, stats: EpochStats):
        self.epochs.append(stats)

    def records(self):
        """Flatten into ``{run_id, epoch, metric, value, config_hash}`` rows."""
        for st in self.epochs:
            for k, v in st.metrics().items():
                yield {"run_id": self.run_id, "epoch": st.epoch, "metric": k,
                       "value": v, "config_hash": self.config_hash}
        for k, v in self.final.items():
            yield {"run_id": self.run_id, "epoch": None, "metric": f"final.{k}",
                   "value": v, "config_hash": self.config_hash}
        if self.harmonic is not None:
            yield {"run_id": self.run_id, "epoch": None, "metric": "final.harmonic_mean",
                   "value": self.harmonic, "config_hash": self.config_hash}
        for k, v in self.rho_gamma.items():
            yield {"run_id": self.run_id, "epoch": None, "metric": f"rho_gamma.{k}",
                   "value": v, "config_hash": self.config_hash}

    def write_jsonl(self, path, append: bool = True):
        with open(path, "a" if append else "w") as fh:
            for row in self.records():
                fh.write(json.dumps(dict(row, timestamp=time.time())) + "\n")

    def summary(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "best_epoch": self.best_epoch,
            "final": self.final,
            "harmonic_mean": self.harmonic,
            "epochs": [asdict(e) for e in self.epochs],
            "histograms": self.histograms,
            "rho_gamma": self.rho_gamma,
        }


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]

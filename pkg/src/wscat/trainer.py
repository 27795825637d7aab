"""Outer minimisation for Standard, TRADES, WSCAT and its ablation variants.

All methods share one step function. Per batch:

1. natural forward (no grad): embeddings form the bank, argmax predictions
   form the positive mask (frozen for this step);
2. inner maximisation: :func:`~wscat.attacks.complete_ae` (``beta = 0`` gives
   the TRADES KL attack);
3. loss ``mean CE(C(x), y) + lam * mean[KL(C(x) || C(x')) + beta * l_con(z', z)]``
   with gradients through both branches and through the bank;
4. one SGD step.

``lam = 0`` skips the attack and gives standard training; ``beta = 0`` skips
the contrastive term and gives TRADES.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import AttackSpec, complete_ae
from .core import build_classifier, cosine_lr, make_sgd, save_checkpoint
from .data import AugmentedDataset, SemiDataset, iter_batches
from .exceptions import ConfigError, ContractError, TrainingDivergence
from .losses import cross_entropy, kl_divergence, wsd_loss
from .metrics import EpochStats, MetricsRecord, accuracy, config_hash, harmonic_mean, robust_accuracy

log = logging.getLogger(__name__)

METHODS = ("standard", "trades", "wscat", "wscat_sup", "wscat_fixed", "wscat_self", "wscat_std")
VARIANTS = ("wscat_sup", "wscat_fixed", "wscat_self", "wscat_std")
CONTRASTIVE_MODE = {"wscat": "wsd", "wscat_sup": "wsd", "wscat_std": "wsd",
                    "wscat_fixed": "supcon", "wscat_self": "nce"}
EARLY_STOP = ("harmonic", "natural", "last")


def _default_train_attack():
    return AttackSpec(family="complete_ae", eps=8 / 255, alpha=2 / 255, steps=10)


def _default_eval_attack():
    return AttackSpec(family="pgd", eps=8 / 255, alpha=1 / 255, steps=20, random_start=True)


@dataclass
class TrainConfig:
    method: str = "wscat"
    lam: float = 1.0
    beta: float = 0.05
    tau: float = 0.5
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    cosine: bool = True
    train_attack: AttackSpec = field(default_factory=_default_train_attack)
    eval_attack: AttackSpec = field(default_factory=_default_eval_attack)
    early_stop: str = "harmonic"
    seed: int = 0
    arch: dict = field(default_factory=lambda: {"arch": "mlp", "hidden": [64], "embed_dim": 16,
                                                "input_mean": 0.5, "input_std": 0.05})
    val_max: int | None = None
    bound_check: str = "batch"
    checkpoint_every: int = 1
    # mean-teacher stage
    mt_epochs: int | None = None
    mt_decay: float = 0.99
    mt_consistency: float = 1.0
    mt_rampup: float = 0.25
    mt_jitter: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.lam < 0 or self.beta < 0:
            raise ConfigError("lam and beta must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.early_stop not in EARLY_STOP:
            raise ConfigError(f"early_stop must be one of {EARLY_STOP}")
        if self.bound_check not in ("off", "batch", "all"):
            raise ConfigError("bound_check must be off, batch or all")
        if not 0 <= self.mt_decay < 1:
            raise ConfigError("mt_decay must lie in [0, 1)")

    @property
    def effective_beta(self) -> float:
        return self.beta if self.method in CONTRASTIVE_MODE else 0.0

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["train_attack"] = self.train_attack.to_dict()
        d["eval_attack"] = self.eval_attack.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for key in ("train_attack", "eval_attack"):
            if isinstance(d.get(key), dict):
                d[key] = AttackSpec(**d[key])
        return cls(**d)


def early_stop_select(history) -> int:
    """Index of the epoch with the highest harmonic mean of validation natural
    and PGD accuracy; ties go to the earliest epoch."""
    if not history:
        raise ContractError("early stopping needs at least one epoch")
    best, best_val = 0, -math.inf
    for i, st in enumerate(history):
        if isinstance(st, EpochStats):
            nat, rob = st.val_natural, st.val_pgd
        else:
            nat, rob = st
        value = harmonic_mean([nat, rob])
        if value > best_val:
            best, best_val = i, value
    return best


def _contrastive_mask(mode, pred, labels):
    if mode == "wsd":
        return pred[:, None] == pred[None, :]
    if mode == "supcon":
        return labels[:, None] == labels[None, :]
    if mode == "nce":
        return torch.eye(len(pred), dtype=torch.bool)
    raise ContractError(f"unknown contrastive mode {mode!r}")


class _Stepper:
    """One optimisation step of the unified objective, plus its statistics."""

    def __init__(self, clf, config: TrainConfig):
        self.clf = clf
        self.cfg = config
        self.mode = CONTRASTIVE_MODE.get(config.method)
        self.beta = config.effective_beta
        self.spec = config.train_attack.replace(family="complete_ae", beta=self.beta,
                                                tau=config.tau, loss="kl+wsd")
        self.gen = torch.Generator().manual_seed(config.seed + 1)

    def loss(self, xb, yb, check_bound=False):
        cfg, clf = self.cfg, self.clf
        stats = {"a1": 0.0, "a2": 0.0, "checked": 0, "violations": 0, "delta": []}
        if cfg.lam == 0:
            _, logits = clf(xb)
            ce = cross_entropy(F.softmax(logits, dim=-1), yb)
            stats["a1"] = float(ce.detach().mean())
            return ce.mean(), stats
        with torch.no_grad():
            z0, logits0 = clf(xb)
            p0 = F.softmax(logits0, dim=-1)
            mask = _contrastive_mask(self.mode or "wsd", p0.argmax(-1), yb)
        x_adv = complete_ae(clf, xb, z0, mask, self.spec, self.gen, p_nat=p0)
        z, logits = clf(xb)
        z_adv, logits_adv = clf(x_adv)
        p, p_adv = F.softmax(logits, dim=-1), F.softmax(logits_adv, dim=-1)
        ce = cross_entropy(p, yb)
        kl = kl_divergence(p, p_adv)
        adv = kl
        if self.beta != 0:
            con_adv = wsd_loss(z_adv, z, mask, cfg.tau)
            adv = kl + self.beta * con_adv
        loss = ce.mean() + cfg.lam * adv.mean()
        with torch.no_grad():
            if self.beta != 0:
                con_nat = wsd_loss(z, z, mask, cfg.tau)
                stats["a1"] = float((ce + cfg.lam * self.beta * con_nat).mean())
                stats["a2"] = float((kl + self.beta * (con_adv - con_nat)).mean())
                if check_bound:
                    self._check_bound(xb, x_adv, mask, kl, con_adv, con_nat, stats)
            else:
                stats["a1"] = float(ce.detach().mean())
                stats["a2"] = float(kl.detach().mean())
        return loss, stats

    def _check_bound(self, xb, x_adv, mask, kl, con_adv, con_nat, stats):
        from .analysis import bound_violations

        n_checked, bad, delta = bound_violations(self.clf, xb, x_adv, mask, self.beta,
                                                 self.cfg.tau, kl, con_adv, con_nat)
        stats["checked"] += n_checked
        stats["violations"] += bad
        stats["delta"].append(delta)


def _as_tensor(x, dtype):
    return torch.as_tensor(np.asarray(x)).to(dtype)


def fit(x, y, config: TrainConfig, *, x_val=None, y_val=None, n_labeled: int | None = None,
        classifier=None, out_dir=None, run_id: str | None = None, on_step=None):
    """Train a classifier on ``(x, y)`` with ``config.method``'s objective.

    ``n_labeled`` marks the first ``n_labeled`` rows as ground-truth labeled so
    batches keep the labeled/pseudo-labeled proportion. Returns the
    early-stopped classifier and its :class:`MetricsRecord`. ``on_step`` is
    called with ``(global_step, classifier)`` after every optimiser step.
    """
    config.validate()
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    if len(x) < config.batch_size:
        raise ConfigError(f"need at least batch_size={config.batch_size} training samples, got {len(x)}")
    n_classes = int(max(y.max() + 1, config.arch.get("n_classes", 0)))
    if classifier is None:
        desc = dict(config.arch, input_shape=list(x.shape[1:]), n_classes=n_classes)
        classifier = build_classifier(desc, seed=config.seed)
    clf = classifier
    dtype = next(clf.parameters()).dtype
    xt, yt = _as_tensor(x, dtype), torch.as_tensor(y)
    has_val = x_val is not None and len(x_val) > 0
    if has_val and config.val_max is not None:
        x_val, y_val = x_val[:config.val_max], y_val[:config.val_max]

    opt = make_sgd(clf.parameters(), config.lr, config.momentum, config.nesterov, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    n_first = len(x) if n_labeled is None else n_labeled
    steps_per_epoch = len(x) // config.batch_size
    total = steps_per_epoch * config.epochs
    stepper = _Stepper(clf, config)
    record = MetricsRecord(run_id or f"{config.method}-{config.seed}", config_hash(config.to_dict()))
    best_state, best_value, step = None, -math.inf, 0
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        a1, a2, checked, bad, deltas, nb = 0.0, 0.0, 0, 0, [], 0
        lr = config.lr
        for bi, idx in enumerate(iter_batches(n_first, len(x) - n_first, config.batch_size, rng)):
            lr = cosine_lr(config.lr, step, total) if config.cosine else config.lr
            for group in opt.param_groups:
                group["lr"] = lr
            check = config.bound_check == "all" or (config.bound_check == "batch" and bi == 0)
            loss, st = stepper.loss(xt[idx], yt[idx], check_bound=check)
            if not torch.isfinite(loss):
                raise TrainingDivergence(epoch, bi, float(loss.detach()))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            if on_step is not None:
                on_step(step, clf)
            a1 += st["a1"]
            a2 += st["a2"]
            checked += st["checked"]
            bad += st["violations"]
            deltas += st["delta"]
            nb += 1
        if has_val:
            nat = accuracy(clf, x_val, y_val)
            rob = robust_accuracy(clf, x_val, y_val, config.eval_attack, seed=config.seed + 1000 + epoch)
        else:
            nat = rob = 0.0
        delta_mean = float(torch.cat(deltas).mean()) if deltas and sum(len(d) for d in deltas) else 0.0
        stats = EpochStats(epoch, a1 / max(nb, 1), a2 / max(nb, 1), nat, rob,
                           harmonic_mean([nat, rob]) if has_val else 0.0, lr,
                           time.perf_counter() - t0, checked, bad, delta_mean)
        record.add_epoch(stats)
        log.info("epoch %d: a1=%.4f a2=%.4f nat=%.3f pgd=%.3f", epoch, stats.a1, stats.a2, nat, rob)
        if not has_val or config.early_stop == "last":
            value = epoch
        else:
            value = stats.harmonic if config.early_stop == "harmonic" else nat
        if value > best_value:
            best_value = value
            best_state = copy.deepcopy(clf.state_dict())
            record.best_epoch = epoch
            if out_dir is not None:
                save_checkpoint(out_dir / "best.ckpt", clf, epoch=epoch,
                                extra={"run_id": record.run_id, "config_hash": record.config_hash})
        if out_dir is not None and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_dir / "last.ckpt", clf, optimizer_state=opt.state_dict(), epoch=epoch,
                            rng_state={"numpy": rng.bit_generator.state,
                                       "attack": stepper.gen.get_state()},
                            extra={"run_id": record.run_id, "config_hash": record.config_hash})
    clf.load_state_dict(best_state)
    return clf, record


def _val(ds):
    return {"x_val": ds.x_val, "y_val": ds.y_val}


def train_standard(x, y, config: TrainConfig, **kwargs):
    """Plain cross-entropy minimisation, no attack."""
    return fit(x, y, config.replace(method="standard", lam=0.0), **kwargs)


def train_trades(data, config: TrainConfig, **kwargs):
    """``CE + lam * KL(C(x) || C(x'))`` with KL-PGD adversarial examples.

    ``data`` is a :class:`SemiDataset` (supervised mode, ``D_l`` only) or an
    :class:`AugmentedDataset` (semi-supervised mode, ``D*``).
    """
    cfg = config.replace(method="trades")
    if isinstance(data, SemiDataset):
        return fit(data.x_labeled, data.y_labeled, cfg, **{**_val(data), **kwargs})
    return fit(data.x, data.y, cfg, n_labeled=data.n_labeled, **{**_val(data), **kwargs})


def train_wscat(dstar: AugmentedDataset, config: TrainConfig, **kwargs):
    """Full WSCAT objective on the pseudo-labeled dataset ``D*``."""
    method = config.method if config.method in ("wscat", "wscat_fixed", "wscat_self", "wscat_std") else "wscat"
    cfg = config.replace(method=method)
    return fit(dstar.x, dstar.y, cfg, n_labeled=dstar.n_labeled, **{**_val(dstar), **kwargs})


def train_variant(variant: str, semi: SemiDataset, config: TrainConfig, dstar: AugmentedDataset | None = None,
                  **kwargs):
    """Ablations: ``wscat_sup`` (labeled data only), ``wscat_fixed`` (SupCon on
    D* labels), ``wscat_self`` (InfoNCE), ``wscat_std`` (pseudo-labels from a
    standard-trained labeler)."""
    from .selftrain import build_dstar, train_mean_teacher

    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg = config.replace(method=variant)
    if variant == "wscat_sup":
        return fit(semi.x_labeled, semi.y_labeled, cfg, **{**_val(semi), **kwargs})
    if variant == "wscat_std":
        labeler, _ = train_standard(semi.x_labeled, semi.y_labeled, config, **_val(semi))
        dstar = build_dstar(semi, labeler, mode="standard")
    elif dstar is None:
        dstar = build_dstar(semi, train_mean_teacher(semi, config), mode="mt")
    return train_wscat(dstar, cfg, **kwargs)

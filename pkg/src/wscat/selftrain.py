"""Stage one: Mean-Teacher pseudo-labeler and the augmented dataset D*."""

from __future__ import annotations

import copy
import logging

import numpy as np
import torch
import torch.nn.functional as F

from .core import build_classifier, cosine_lr, make_sgd
from .data import LABELED, PSEUDO, AugmentedDataset, SemiDataset, iter_batches
from .exceptions import ConfigError, ContractError
from .losses import cross_entropy
from .metrics import predict

log = logging.getLogger(__name__)


@torch.no_grad()
def ema_update(teacher, student, decay: float):
    """``theta_t <- d * theta_t + (1 - d) * theta_s`` element-wise, in place."""
    if not 0 <= decay < 1:
        raise ContractError(f"EMA decay must lie in [0, 1), got {decay}")
    t_params = list(teacher.parameters()) if hasattr(teacher, "parameters") else list(teacher)
    s_params = list(student.parameters()) if hasattr(student, "parameters") else list(student)
    if len(t_params) != len(s_params):
        raise ContractError("teacher and student have different parameter counts")
    for t, s in zip(t_params, s_params):
        if t.shape != s.shape:
            raise ContractError(f"EMA shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(decay).add_(s.detach(), alpha=1 - decay)
    return teacher


def augment(x: torch.Tensor, gen: torch.Generator, jitter: float) -> torch.Tensor:
    """Random crop (4-pixel padding) + horizontal flip for images; Gaussian
    input jitter for vector data. Output stays in ``[0, 1]``."""
    if x.dim() == 4:
        n, _, h, w = x.shape
        flip = torch.rand(n, generator=gen) < 0.5
        x = torch.where(flip[:, None, None, None], x.flip(-1), x)
        padded = F.pad(x, (4, 4, 4, 4), mode="reflect")
        dx = torch.randint(0, 9, (n,), generator=gen)
        dy = torch.randint(0, 9, (n,), generator=gen)
        return torch.stack([padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)])
    noise = torch.randn(x.shape, generator=gen, dtype=x.dtype) * jitter
    return (x + noise).clamp(0.0, 1.0)


def train_mean_teacher(semi: SemiDataset, config, *, return_student: bool = False):
    """Train a student with CE on labeled rows plus a consistency penalty
    (squared difference between student and teacher probabilities on two
    independently augmented views of every row); the EMA teacher is returned.

    The consistency weight ramps linearly to ``config.mt_consistency`` over the
    first ``config.mt_rampup`` fraction of epochs.
    """
    if semi.n_labeled == 0:
        raise ConfigError("Mean Teacher needs a non-empty labeled set")
    epochs = config.mt_epochs or config.epochs
    jitter = config.mt_jitter if config.mt_jitter is not None else config.train_attack.eps / 2
    x = np.concatenate([semi.x_labeled, semi.x_unlabeled]).astype(np.float32)
    y = np.concatenate([semi.y_labeled, np.full(semi.n_unlabeled, -1)]).astype(np.int64)
    desc = dict(config.arch, input_shape=list(x.shape[1:]), n_classes=semi.n_classes)
    student = build_classifier(desc, seed=config.seed)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    opt = make_sgd(student.parameters(), config.lr, config.momentum, config.nesterov, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 7)
    xt, yt = torch.as_tensor(x), torch.as_tensor(y)
    batch = min(config.batch_size, len(x))
    total = (len(x) // batch) * epochs
    ramp = max(config.mt_rampup * epochs, 1e-12)
    step = 0
    for epoch in range(epochs):
        weight = config.mt_consistency * min(1.0, epoch / ramp) if config.mt_rampup > 0 else config.mt_consistency
        for idx in iter_batches(semi.n_labeled, semi.n_unlabeled, batch, rng):
            if config.cosine:
                for group in opt.param_groups:
                    group["lr"] = cosine_lr(config.lr, step, total)
            xb, yb = xt[idx], yt[idx]
            p_s = student.probs(augment(xb, gen, jitter))
            with torch.no_grad():
                p_t = teacher.probs(augment(xb, gen, jitter))
            lab = yb >= 0
            ce = cross_entropy(p_s[lab], yb[lab]).mean() if lab.any() else p_s.sum() * 0
            consistency = ((p_s - p_t) ** 2).sum(-1).mean()
            loss = ce + weight * consistency
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            ema_update(teacher, student, config.mt_decay)
            step += 1
    return (teacher, student) if return_student else teacher


def build_dstar(semi: SemiDataset, labeler, mode: str = "mt") -> AugmentedDataset:
    """Label every unlabeled example with ``argmax labeler(x_u)``; ``D_l`` is untouched."""
    if mode not in ("mt", "standard"):
        raise ConfigError(f"pseudo-labeler mode must be mt or standard, got {mode!r}")
    y_u = predict(labeler, semi.x_unlabeled) if semi.n_unlabeled else np.zeros(0, np.int64)
    x = np.concatenate([semi.x_labeled, semi.x_unlabeled]).astype(np.float32)
    y = np.concatenate([semi.y_labeled, y_u]).astype(np.int64)
    tags = np.array([LABELED] * semi.n_labeled + [PSEUDO] * semi.n_unlabeled, dtype=object)
    meta = dict(semi.meta, labeler=mode)
    return AugmentedDataset(x, y, tags, semi.n_classes, mode, meta,
                            semi.x_val, semi.y_val, semi.x_test, semi.y_test)

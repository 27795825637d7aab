"""l-infinity attacks: FGSM, PGD, CW-margin PGD, and complete AE generation.

Every attack returns points inside the eps-ball around the natural input and
inside ``[0, 1]``. Gradients are taken with respect to the input only; the
classifier is never mutated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from typing import Callable

import torch
import torch.nn.functional as F

from .core import input_gradient
from .exceptions import AttackError, ContractError
from .losses import cross_entropy, cw_margin, kl_divergence, wsd_loss

FAMILIES = ("fgsm", "pgd", "cw", "complete_ae")
LOSSES = ("ce", "kl", "cw", "kl+wsd")
DEFAULT_LOSS = {"fgsm": "ce", "pgd": "ce", "cw": "cw", "complete_ae": "kl+wsd"}


def parse_eps(value) -> float:
    """Accept ``0.0314``, ``"0.0314"`` or an exact fraction like ``"8/255"``."""
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ContractError(f"cannot parse budget {value!r}") from exc
    return float(value)


@dataclass(frozen=True)
class AttackSpec:
    family: str = "pgd"
    eps: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    random_start: bool = False
    beta: float = 0.0
    loss: str | None = None
    tau: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "eps", parse_eps(self.eps))
        object.__setattr__(self, "alpha", parse_eps(self.alpha))
        if self.loss is None and self.family in DEFAULT_LOSS:
            object.__setattr__(self, "loss", DEFAULT_LOSS[self.family])
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown attack family {self.family!r}")
        if self.loss not in LOSSES:
            raise ContractError(f"unknown attack loss {self.loss!r}")
        if self.eps < 0:
            raise ContractError("eps must be >= 0")
        # eps = 0 is the degenerate zero-budget attack; alpha is then irrelevant
        if self.eps > 0 and not 0 < self.alpha <= 2 * self.eps + 1e-12:
            raise ContractError(f"need 0 < alpha <= 2*eps, got alpha={self.alpha}, eps={self.eps}")
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        if self.beta < 0:
            raise ContractError("beta must be >= 0")
        if self.tau <= 0:
            raise ContractError("tau must be > 0")

    def replace(self, **changes) -> "AttackSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


def project_linf(x_adv, x0, eps: float):
    """Clamp into the eps-ball around ``x0``, then into ``[0, 1]``."""
    x_adv = torch.max(torch.min(x_adv, x0 + eps), x0 - eps)
    return x_adv.clamp(0.0, 1.0)


def random_start(x0, eps: float, generator: torch.Generator | None = None):
    noise = torch.rand(x0.shape, generator=generator, dtype=x0.dtype)
    return project_linf(x0 + (2 * noise - 1) * eps, x0, eps)


def pgd(loss_fn: Callable, x0, spec: AttackSpec, generator: torch.Generator | None = None):
    """Sign-gradient ascent on ``loss_fn`` (summed over the batch) inside the ball."""
    x0 = x0.detach()
    x = random_start(x0, spec.eps, generator) if spec.random_start else x0.clone()
    for _ in range(spec.steps):
        grad = input_gradient(lambda v: loss_fn(v).sum(), x)
        x = project_linf(x + spec.alpha * grad.sign(), x0, spec.eps)
    return x.detach()


def fgsm(classifier, x, y, eps: float):
    """Single full-budget step on cross-entropy."""
    y = torch.as_tensor(y, dtype=torch.long)
    grad = input_gradient(lambda v: cross_entropy(classifier.probs(v), y).sum(), x)
    return project_linf(x.detach() + eps * grad.sign(), x.detach(), eps).detach()


def cw_linf(classifier, x, y, spec: AttackSpec, generator=None):
    y = torch.as_tensor(y, dtype=torch.long)
    return pgd(lambda v: cw_margin(classifier.logits(v), y), x, spec, generator)


def ce_pgd(classifier, x, y, spec: AttackSpec, generator=None):
    y = torch.as_tensor(y, dtype=torch.long)
    return pgd(lambda v: cross_entropy(classifier.probs(v), y), x, spec, generator)


def kl_objective(classifier, p_nat):
    """``x' -> KL(C(x) || C(x'))`` with the natural prediction held constant."""
    p_nat = p_nat.detach()
    return lambda v: kl_divergence(p_nat, classifier.probs(v))


def kl_pgd(classifier, x, spec: AttackSpec, generator=None, p_nat=None):
    """TRADES-style AE: PGD on the KL objective."""
    if p_nat is None:
        with torch.no_grad():
            p_nat = classifier.probs(x)
    return pgd(kl_objective(classifier, p_nat), x, spec, generator)


def complete_objective(classifier, p_nat, bank, mask, beta: float, tau: float):
    """Per-sample ``KL(C(x) || C(x')) + beta * l_con(f(x'), ...)``.

    ``p_nat``, ``bank`` and ``mask`` are frozen constants. With ``beta == 0``
    the contrastive branch is not evaluated at all.
    """
    p_nat = p_nat.detach()
    bank = bank.detach()

    def objective(v):
        z, logits = classifier(v)
        value = kl_divergence(p_nat, F.softmax(logits, dim=-1))
        if beta != 0:
            value = value + beta * wsd_loss(z, bank, mask, tau)
        return value

    return objective


def complete_ae(classifier, x, bank, mask, spec: AttackSpec, generator=None, p_nat=None):
    """Complete AE generation: PGD on KL plus beta times the dynamic loss.

    ``bank`` holds the natural embeddings of the batch and ``mask`` the
    positive sets (both computed once, before the first step).
    """
    if p_nat is None:
        with torch.no_grad():
            p_nat = classifier.probs(x)
    if spec.beta == 0:
        return pgd(kl_objective(classifier, p_nat), x, spec, generator)
    objective = complete_objective(classifier, p_nat, bank, mask, spec.beta, spec.tau)
    return pgd(objective, x, spec, generator)


def batch_bank(classifier, x):
    """Natural embeddings, probabilities and predicted-class positive mask."""
    with torch.no_grad():
        z, logits = classifier(x)
        p = F.softmax(logits, dim=-1)
        pred = p.argmax(-1)
    return z, p, pred[:, None] == pred[None, :]


def run_attack(classifier, x, y, spec: AttackSpec, generator=None):
    """Dispatch an evaluation attack by family."""
    if spec.family == "fgsm":
        return fgsm(classifier, x, y, spec.eps)
    if spec.family == "cw":
        return cw_linf(classifier, x, y, spec, generator)
    if spec.family == "complete_ae":
        z, p, mask = batch_bank(classifier, x)
        return complete_ae(classifier, x, z, mask, spec, generator, p_nat=p)
    if spec.loss == "kl":
        return kl_pgd(classifier, x, spec, generator)
    if spec.loss == "cw":
        return cw_linf(classifier, x, y, spec, generator)
    return ce_pgd(classifier, x, y, spec, generator)


def check_feasible(x_adv, x0, eps: float, name: str = "attack", tol: float = 1e-7):
    """Raise :class:`AttackError` naming ``name`` if ``x_adv`` leaves the ball or range."""
    if x_adv.shape != x0.shape:
        raise AttackError(f"{name} changed the input shape {tuple(x0.shape)} -> {tuple(x_adv.shape)}")
    gap = (x_adv - x0).abs().max().item() if x0.numel() else 0.0
    if gap > eps + tol:
        raise AttackError(f"{name} left the eps-ball: |x'-x|_inf = {gap:.3g} > {eps:.3g}")
    if x0.numel() and (x_adv.min() < 0 or x_adv.max() > 1):
        raise AttackError(f"{name} left the [0, 1] input range")

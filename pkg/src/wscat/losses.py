"""Scalar losses and distances used by the attacks and the trainer.

Every contrastive loss here is evaluated against an *embedding bank*: the
natural embeddings of the current batch. Rows of the similarity matrix are
anchors (one per adversarial / query embedding), columns are bank members.
A *positive mask* ``(B, N)`` marks, for each anchor, the bank members sharing
its predicted class; the anchor's own natural embedding is always a member.

All functions are batched and return one value per anchor unless stated.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .exceptions import ContractError

PROB_FLOOR = 1e-12
NORM_GUARD = 1e-12


def cross_entropy(p, y):
    """``-log p[y]`` with ``p[y]`` floored at 1e-12."""
    p = torch.as_tensor(p)
    y = torch.as_tensor(y, dtype=torch.long)
    if p.dim() == 1:
        return cross_entropy(p[None], y.reshape(1))[0]
    if y.numel() and (y.min() < 0 or y.max() >= p.shape[-1]):
        raise ContractError(f"class index out of range [0, {p.shape[-1]})")
    py = p.gather(-1, y[:, None]).squeeze(-1)
    return -torch.log(py.clamp_min(PROB_FLOOR))


def kl_divergence(p, q):
    """``sum_i p_i log(p_i / q_i)``; ``q`` floored, zero-``p`` terms contribute 0."""
    p = torch.as_tensor(p)
    q = torch.as_tensor(q, dtype=p.dtype)
    logq = torch.log(q.clamp_min(PROB_FLOOR))
    logp = torch.log(p.clamp_min(PROB_FLOOR))
    terms = torch.where(p > 0, p * (logp - logq), torch.zeros_like(p))
    return terms.sum(-1)


def normalize(z):
    return z / (z.norm(dim=-1, keepdim=True) + NORM_GUARD)


def similarity(z1, z2, tau: float = 0.5):
    """Cosine similarity over temperature, element-paired along the last axis."""
    z1 = torch.as_tensor(z1)
    z2 = torch.as_tensor(z2, dtype=z1.dtype)
    return (normalize(z1) * normalize(z2)).sum(-1) / tau


def similarity_matrix(queries, bank, tau: float = 0.5):
    """``S[i, n] = s(queries[i], bank[n])``."""
    return normalize(queries) @ normalize(bank).T / tau


def positive_mask(bank_labels, anchor_labels):
    """``M[i, n]`` is True iff bank member ``n`` shares anchor ``i``'s label."""
    bank_labels = torch.as_tensor(bank_labels)
    anchor_labels = torch.as_tensor(anchor_labels)
    return anchor_labels[:, None] == bank_labels[None, :]


def build_positive_set(predictions, anchor: int):
    """Indices of bank members predicted into the anchor's class (anchor included)."""
    predictions = torch.as_tensor(predictions)
    return torch.nonzero(predictions == predictions[anchor]).flatten()


def _masked_log_ratio(sim, mask):
    log_ratio = sim - torch.logsumexp(sim, dim=-1, keepdim=True)
    mask = mask.to(sim.dtype)
    return -(log_ratio * mask).sum(-1) / mask.sum(-1)


def contrastive_from_similarities(sim, mask):
    """Mean negative log-ratio over the positives of each row of ``sim``."""
    return _masked_log_ratio(sim, mask)


def wsd_loss(queries, bank, mask, tau: float = 0.5):
    """Weakly supervised dynamic loss for each query against the bank.

    ``mask`` is a ``(B, N)`` positive mask, normally from predicted labels
    (:func:`positive_mask` applied to ``argmax C`` of the natural batch).
    """
    if not bool(mask.any(-1).all()):
        raise ContractError("every anchor needs a non-empty positive set")
    return _masked_log_ratio(similarity_matrix(queries, bank, tau), mask)


def info_nce(queries, anchors, bank, tau: float = 0.5):
    """InfoNCE with the anchor's own natural embedding as the single positive."""
    anchors = torch.as_tensor(anchors, dtype=torch.long).reshape(-1)
    sim = similarity_matrix(queries, bank, tau)
    log_ratio = sim - torch.logsumexp(sim, dim=-1, keepdim=True)
    return -log_ratio.gather(-1, anchors[:, None]).squeeze(-1)


def supcon_loss(queries, anchors, bank, labels, tau: float = 0.5):
    """Same form as :func:`wsd_loss` with positives fixed by (pseudo-)labels."""
    labels = torch.as_tensor(labels)
    anchors = torch.as_tensor(anchors, dtype=torch.long).reshape(-1)
    return wsd_loss(queries, bank, positive_mask(labels, labels[anchors]), tau)


def wsd_loss_maxapprox(queries, bank, mask, tau: float = 0.5):
    """Max-approximation of :func:`wsd_loss` (property tests only).

    For each positive ``p`` the log-sum-exp ``log(1 + sum_{n != p} e^{s_n - s_p})``
    is replaced by ``max(0, max_{n != p} (s_n - s_p))``; an empty inner max is 0.
    """
    sim = similarity_matrix(queries, bank, tau)
    n = sim.shape[-1]
    diff = sim[:, None, :] - sim[:, :, None]  # [i, p, n] = s_n - s_p
    eye = torch.eye(n, dtype=torch.bool)
    diff = diff.masked_fill(eye[None], float("-inf"))
    inner = diff.max(-1).values.clamp_min(0.0) if n > 1 else torch.zeros_like(sim)
    m = mask.to(sim.dtype)
    return (inner * m).sum(-1) / m.sum(-1)


def sbar(z, bank, mask, tau: float = 0.5):
    """``s̄(z)``: the contrastive loss with ``z`` in the query slot."""
    return wsd_loss(z, bank, mask, tau)


def delta_distance(z_a, z_b, bank, mask, tau: float = 0.5):
    """``|s̄(z_a) - s̄(z_b)|`` against one frozen bank and positive mask."""
    return (sbar(z_a, bank, mask, tau) - sbar(z_b, bank, mask, tau)).abs()


def cw_margin(logits, y):
    """``max_{i != y} logit_i - logit_y`` (kappa = 0)."""
    y = torch.as_tensor(y, dtype=torch.long)
    true = logits.gather(-1, y[:, None]).squeeze(-1)
    other = logits.masked_fill(F.one_hot(y, logits.shape[-1]).bool(), float("-inf"))
    return other.max(-1).values - true

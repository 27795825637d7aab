"""Classifier model C = g(f(x)), input gradients, and the checkpoint container.

The encoder ``f`` maps inputs to an embedding ``z``; the decoder ``g`` is a
single linear layer producing logits, so ``C(x) = softmax(g(f(x)))``. The
embedding used by every contrastive loss is the encoder output, i.e. the
activations immediately before the final linear layer.
"""

from __future__ import annotations

import io
import json
import math
import struct
from math import prod
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ContractError, FormatError, NumericalError

CHECKPOINT_MAGIC = b"WSCATCKPT"
CHECKPOINT_VERSION = 1


class Classifier(nn.Module):
    """Encoder + linear decoder; ``forward`` returns ``(z, logits)``."""

    def __init__(self, encoder: nn.Sequential, embed_dim: int, n_classes: int,
                 descriptor: dict | None = None):
        super().__init__()
        self.encoder = encoder
        self.decoder = nn.Linear(embed_dim, n_classes)
        self.embed_dim = embed_dim
        self.n_classes = n_classes
        self.descriptor = dict(descriptor or {})

    def forward(self, x):
        z = self.encoder(x)
        return z, self.decoder(z)

    def embed(self, x):
        return self.encoder(x)

    def logits(self, x):
        return self.decoder(self.encoder(x))

    def probs(self, x):
        return F.softmax(self.logits(x), dim=-1)

    @property
    def input_shape(self):
        shape = self.descriptor.get("input_shape")
        return tuple(shape) if shape is not None else None


class Standardize(nn.Module):
    """Fixed affine input standardisation ``(x - mean) / std``."""

    def __init__(self, mean: float = 0.0, std: float = 1.0):
        super().__init__()
        self.mean = float(mean)
        self.std = float(std)

    def forward(self, x):
        return (x - self.mean) / self.std


ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "softplus": nn.Softplus}


def _mlp_encoder(input_shape, hidden, embed_dim, act=nn.ReLU):
    layers: list[nn.Module] = [nn.Flatten()]
    width = prod(input_shape)
    for h in hidden:
        layers += [nn.Linear(width, h), act()]
        width = h
    layers += [nn.Linear(width, embed_dim), act()]
    return nn.Sequential(*layers)


def _conv_encoder(input_shape, widths, embed_dim):
    channels = input_shape[0]
    layers: list[nn.Module] = []
    for w in widths:
        layers += [nn.Conv2d(channels, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
        channels = w
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(channels, embed_dim), nn.ReLU()]
    return nn.Sequential(*layers)


def build_classifier(descriptor: dict, seed: int | None = None) -> Classifier:
    """Instantiate a classifier from an architecture descriptor.

    Supported ``arch`` values are ``"mlp"`` (synthetic vectors) and ``"conv"``
    (small image CNN, 2-4 blocks). MLPs accept an optional ``activation``
    (``relu`` by default, or the smooth ``tanh`` / ``softplus``).
    ``"wrn-28-10"`` is a recognised descriptor that is deliberately not
    built at desk scale.
    """
    arch = descriptor.get("arch")
    if seed is not None:
        torch.manual_seed(seed)
    input_shape = tuple(descriptor["input_shape"])
    n_classes = int(descriptor["n_classes"])
    embed_dim = int(descriptor.get("embed_dim", 16))
    act = descriptor.get("activation", "relu")
    if act not in ACTIVATIONS:
        raise ContractError(f"unknown activation {act!r}")
    if arch == "mlp":
        encoder = _mlp_encoder(input_shape, descriptor.get("hidden", [64]), embed_dim, ACTIVATIONS[act])
    elif arch == "conv":
        widths = descriptor.get("widths", [32, 64, 128])
        if not 2 <= len(widths) <= 4:
            raise ContractError(f"conv encoder needs 2-4 blocks, got {len(widths)}")
        encoder = _conv_encoder(input_shape, widths, embed_dim)
    elif arch == "wrn-28-10":
        raise NotImplementedError("wrn-28-10 is not built at desk scale")
    else:
        raise ContractError(f"unknown architecture {arch!r}")
    mean, std = descriptor.get("input_mean", 0.0), descriptor.get("input_std", 1.0)
    if (mean, std) != (0.0, 1.0):
        encoder = nn.Sequential(Standardize(mean, std), *encoder)
    desc = dict(descriptor, input_shape=list(input_shape), embed_dim=embed_dim)
    return Classifier(encoder, embed_dim, n_classes, desc)


def check_input(classifier: Classifier, x: torch.Tensor) -> None:
    shape = classifier.input_shape
    if shape is not None and tuple(x.shape[1:]) != shape:
        raise ContractError(f"input shape {tuple(x.shape[1:])} does not match architecture {shape}")
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ContractError("input entries must lie in [0, 1]")


def _locate_nonfinite(classifier: Classifier, x: torch.Tensor) -> str:
    h = x
    for name, layer in classifier.encoder.named_children():
        h = layer(h)
        if not torch.isfinite(h).all():
            return f"encoder.{name} ({layer.__class__.__name__})"
    return "decoder"


def forward(classifier: Classifier, x: torch.Tensor):
    """Checked forward pass returning the embedding and probability vectors."""
    check_input(classifier, x)
    z, logits = classifier(x)
    if not (torch.isfinite(z).all() and torch.isfinite(logits).all()):
        raise NumericalError(f"non-finite output from {_locate_nonfinite(classifier, x)}")
    return z, F.softmax(logits, dim=-1)


def input_gradient(loss_fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Gradient of a scalar ``loss_fn(x)`` with respect to ``x``.

    Parameter gradients are never accumulated. A loss that does not depend on
    ``x`` yields zeros.
    """
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        loss = loss_fn(x)
        if loss.dim() != 0:
            raise ContractError("loss closure must return a scalar")
        if not loss.requires_grad:
            return torch.zeros_like(x)
        (grad,) = torch.autograd.grad(loss, [x], allow_unused=True)
    if grad is None:
        return torch.zeros_like(x)
    return grad.detach()


def parameter_vector(classifier: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in classifier.parameters()])


# --------------------------------------------------------------------------
# checkpoint container

def save_checkpoint(path, classifier: Classifier, *, optimizer_state=None, epoch: int = 0,
                    rng_state=None, extra: dict | None = None) -> None:
    """Write ``magic | u32 version | u32 header length | JSON header | torch payload``."""
    header = json.dumps({
        "descriptor": classifier.descriptor,
        "epoch": int(epoch),
        "extra": extra or {},
    }, sort_keys=True).encode()
    buf = io.BytesIO()
    torch.save({
        "params": classifier.state_dict(),
        "optimizer": optimizer_state,
        "rng": rng_state,
    }, buf)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[Classifier, dict]:
    """Read a checkpoint; returns the classifier and a dict with
    ``epoch``, ``optimizer``, ``rng`` and ``extra``."""
    raw = Path(path).read_bytes()
    n = len(CHECKPOINT_MAGIC)
    if raw[:n] != CHECKPOINT_MAGIC:
        raise FormatError("checkpoint magic mismatch")
    if len(raw) < n + 8:
        raise FormatError("checkpoint header truncated")
    version, hlen = struct.unpack("<II", raw[n:n + 8])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[n + 8:n + 8 + hlen])
        payload = torch.load(io.BytesIO(raw[n + 8 + hlen:]), weights_only=False)
    except Exception as exc:  # noqa: BLE001
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    clf = build_classifier(header["descriptor"])
    clf.to(next(iter(payload["params"].values())).dtype)
    clf.load_state_dict(payload["params"])
    return clf, {
        "epoch": header["epoch"],
        "extra": header["extra"],
        "optimizer": payload["optimizer"],
        "rng": payload["rng"],
    }


# --------------------------------------------------------------------------
# optimisation helpers shared by all trainers

def make_sgd(params, lr: float, momentum: float = 0.9, nesterov: bool = True,
             weight_decay: float = 5e-4) -> torch.optim.SGD:
    return torch.optim.SGD(params, lr=lr, momentum=momentum,
                           nesterov=nesterov and momentum > 0, weight_decay=weight_decay)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1 + math.cos(math.pi * step / total_steps))

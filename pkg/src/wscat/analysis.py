"""Feature-robustness analyses: embedding similarity distributions, empirical
rho/gamma statistics, the per-sample Delta bound, and the beta / unlabeled
data sweeps."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .attacks import AttackSpec, batch_bank, complete_ae
from .exceptions import ContractError
from .losses import cross_entropy, kl_divergence, normalize, wsd_loss
from .metrics import harmonic_mean

log = logging.getLogger(__name__)

BOUND_TOL = 1e-6


# --------------------------------------------------------------------------
# per-sample Delta <= l_adv / beta

def bound_violations(classifier, xb, x_adv, mask, beta, tau, kl, con_adv, con_nat):
    """Check ``Delta(z', z) <= l_adv(x', x) / beta`` on samples whose contrastive
    loss increased. Candidates flagged in working precision are re-evaluated
    in float64 before counting. Returns ``(n_checked, n_violations, deltas)``."""
    if beta == 0:
        return 0, 0, torch.zeros(0)
    with torch.no_grad():
        applies = con_adv >= con_nat
        delta = (con_adv - con_nat).abs()
        l_adv = kl + beta * (con_adv - con_nat)
        flagged = applies & (delta - l_adv / beta > BOUND_TOL)
        n_bad = 0
        if flagged.any():
            clf64 = copy.deepcopy(classifier).double()
            x64, xa64 = xb.double(), x_adv.double()
            z, logits = clf64(x64)
            za, logits_a = clf64(xa64)
            idx = torch.nonzero(flagged).flatten()
            kl64 = kl_divergence(F.softmax(logits[idx], -1), F.softmax(logits_a[idx], -1))
            c_adv = wsd_loss(za[idx], z, mask[idx], tau)
            c_nat = wsd_loss(z[idx], z, mask[idx], tau)
            d64 = (c_adv - c_nat).abs()
            l64 = kl64 + beta * (c_adv - c_nat)
            n_bad = int(((c_adv >= c_nat) & (d64 - l64 / beta > BOUND_TOL)).sum())
    return int(applies.sum()), n_bad, delta[applies].detach().float()


# --------------------------------------------------------------------------
# similarity distributions

@dataclass
class SimilarityHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    attack: str

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([f"{lo:.6f}", f"{hi:.6f}", int(c)])

    def summary(self) -> dict:
        return {"attack": self.attack, "mean": self.mean, "n": self.n,
                "edges": self.edges.tolist(), "counts": self.counts.tolist()}


def identity_generator(classifier, x):
    return x


def random_noise_generator(eps: float, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)

    def generate(classifier, x):
        noise = (2 * torch.rand(x.shape, generator=gen, dtype=x.dtype) - 1) * eps
        return (x + noise).clamp(0, 1)

    generate.eps = eps
    return generate


def complete_ae_generator(spec: AttackSpec, seed: int = 0):
    """Batch-level complete AE generator (bank = the batch). ``spec.beta = 0``
    gives the KL-only TRADES generator."""
    gen = torch.Generator().manual_seed(seed)

    def generate(classifier, x):
        z, p, mask = batch_bank(classifier, x)
        return complete_ae(classifier, x, z, mask, spec, gen, p_nat=p)

    generate.eps = spec.eps
    return generate


def cosine_similarities(classifier, x, generator, batch_size: int = 128) -> np.ndarray:
    dtype = next(classifier.parameters()).dtype
    x = torch.as_tensor(np.asarray(x)).to(dtype)
    out = []
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        x_adv = generator(classifier, xb)
        with torch.no_grad():
            z, za = classifier.embed(xb), classifier.embed(x_adv)
            out.append((normalize(z) * normalize(za)).sum(-1).clamp(-1, 1))
    return torch.cat(out).numpy()


def similarity_distribution(classifier, x, generators: dict, bins: int = 50, batch_size: int = 128):
    """Per-generator histogram of ``cos(f(x), f(x'))`` over ``[-1, 1]``."""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    result = {}
    for name, generator in generators.items():
        sims = cosine_similarities(classifier, x, generator, batch_size)
        counts, _ = np.histogram(sims, bins=edges)
        result[name] = SimilarityHistogram(edges, counts, float(sims.mean()), name)
    return result


# --------------------------------------------------------------------------
# empirical rho / gamma

@dataclass
class RhoGamma:
    rho: float
    gamma: float
    a1: float
    a2: float
    checked: int
    violations: int
    loss_max: float
    delta_max: float
    beta: float
    delta: float = 0.05
    note: str = "gamma is an empirical lower bound of the supremum (attack-found x')"

    def hoeffding_terms(self, n_labeled: int, n_total: int) -> dict:
        """Descriptive only: empirical maxima stand in for the unobservable suprema."""
        c = math.log(1 / self.delta)
        return {"rho_bound": self.a1 + self.loss_max * math.sqrt(c / (2 * max(n_labeled, 1))),
                "gamma_bound": self.a2 / max(self.beta, 1e-12) + self.delta_max * math.sqrt(c / (2 * max(n_total, 1)))}

    def to_dict(self) -> dict:
        return asdict(self)


def empirical_rho_gamma(classifier, x, y, spec: AttackSpec, beta: float, tau: float = 0.5,
                        lam: float = 1.0, batch_size: int = 128, seed: int = 0, delta: float = 0.05):
    """Empirical ``rho`` (mean natural loss ``CE + lam*beta*l_con(z, z)``),
    ``gamma`` (mean ``Delta(f(x'), f(x))`` with ``x'`` from complete AE
    generation), the two halves ``A1``/``A2`` of the reformulated objective,
    and the per-sample bound check."""
    dtype = next(classifier.parameters()).dtype
    x = torch.as_tensor(np.asarray(x)).to(dtype)
    y = torch.as_tensor(np.asarray(y), dtype=torch.long)
    spec = spec.replace(family="complete_ae", beta=beta, tau=tau)
    gen = torch.Generator().manual_seed(seed)
    l_nat, deltas, l_adv = [], [], []
    checked = bad = 0
    if beta == 0:
        log.info("beta = 0: Delta bound check skipped")
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        z0, p0, mask = batch_bank(classifier, xb)
        x_adv = complete_ae(classifier, xb, z0, mask, spec, gen, p_nat=p0)
        with torch.no_grad():
            za, logits_a = classifier(x_adv)
            ce = cross_entropy(p0, yb)
            kl = kl_divergence(p0, F.softmax(logits_a, -1))
            c_nat = wsd_loss(z0, z0, mask, tau)
            c_adv = wsd_loss(za, z0, mask, tau)
        l_nat.append(ce + lam * beta * c_nat)
        deltas.append((c_adv - c_nat).abs())
        l_adv.append(kl + beta * (c_adv - c_nat))
        if beta > 0:
            n, b, _ = bound_violations(classifier, xb, x_adv, mask, beta, tau, kl, c_adv, c_nat)
            checked += n
            bad += b
    l_nat, deltas, l_adv = torch.cat(l_nat), torch.cat(deltas), torch.cat(l_adv)
    out = RhoGamma(float(l_nat.mean()), float(deltas.mean()), float(l_nat.mean()), float(l_adv.mean()),
                   checked, bad, float(l_nat.max()), float(deltas.max()), beta, delta)
    return out


# --------------------------------------------------------------------------
# sweeps

@dataclass
class SweepResult:
    rows: list = field(default_factory=list)   # dicts: seed, value, natural, pgd, harmonic
    selected: dict = field(default_factory=dict)  # seed -> selected value
    key: str = "beta"

    def table(self):
        values = sorted({r[self.key] for r in self.rows})
        return [{self.key: v, "mean_harmonic": float(np.mean([r["harmonic"] for r in self.rows
                                                                if r[self.key] == v]))}
                for v in values]


def _select(rows, key):
    """Argmax harmonic mean; ties go to the smallest key value."""
    best = max(rows, key=lambda r: (r["harmonic"], -r[key]))
    return best[key]


def _final_val_metrics(record):
    best = record.epochs[record.best_epoch]
    return best.val_natural, best.val_pgd


def beta_sweep(semi, grid, config, seeds=(0,), dstar=None, train_kwargs=None):
    """Train WSCAT for each beta in ``grid`` and seed; select by the validation
    harmonic mean of natural and PGD accuracy (ties: smallest beta)."""
    from .selftrain import build_dstar, train_mean_teacher
    from .trainer import train_wscat

    grid = sorted(set(float(b) for b in grid))
    if not grid:
        raise ContractError("beta grid is empty")
    result = SweepResult(key="beta")
    for seed in seeds:
        cfg = config.replace(seed=seed, method="wscat")
        ds = dstar if dstar is not None else build_dstar(semi, train_mean_teacher(semi, cfg), "mt")
        rows = []
        for beta in grid:
            _, rec = train_wscat(ds, cfg.replace(beta=beta), **(train_kwargs or {}))
            nat, rob = _final_val_metrics(rec)
            rows.append({"seed": seed, "beta": beta, "natural": nat, "pgd": rob,
                         "harmonic": harmonic_mean([nat, rob])})
        result.rows += rows
        result.selected[seed] = _select(rows, "beta")
    return result


def unlabeled_scaling_sweep(semi, fractions, config, seeds=(0,), train_kwargs=None):
    """WSCAT trained on ``D_l`` plus a seeded fraction of ``D_u``; harmonic
    mean of validation natural/PGD accuracy per fraction. Fraction 0 runs the
    supervised variant."""
    from .selftrain import build_dstar, train_mean_teacher
    from .trainer import train_variant, train_wscat

    fractions = sorted(set(float(f) for f in fractions))
    if any(not 0 <= f <= 1 for f in fractions):
        raise ContractError("fractions must lie in [0, 1]")
    result = SweepResult(key="fraction")
    for seed in seeds:
        cfg = config.replace(seed=seed, method="wscat")
        for frac in fractions:
            sub = semi.subsample_unlabeled(frac, seed=seed)
            if sub.n_unlabeled == 0:
                _, rec = train_variant("wscat_sup", sub, cfg, **(train_kwargs or {}))
            else:
                dstar = build_dstar(sub, train_mean_teacher(sub, cfg), "mt")
                _, rec = train_wscat(dstar, cfg, **(train_kwargs or {}))
            nat, rob = _final_val_metrics(rec)
            result.rows.append({"seed": seed, "fraction": frac, "natural": nat, "pgd": rob,
                                "harmonic": harmonic_mean([nat, rob])})
    return result

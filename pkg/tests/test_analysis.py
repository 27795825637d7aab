import csv

import numpy as np
import pytest
import torch

from wscat.analysis import (SweepResult, _select, bound_violations, complete_ae_generator, cosine_similarities,
                            empirical_rho_gamma, identity_generator, random_noise_generator,
                            similarity_distribution, unlabeled_scaling_sweep)
from wscat.attacks import AttackSpec, batch_bank
from wscat.exceptions import ContractError
from wscat.losses import kl_divergence, wsd_loss


def test_identity_generator_gives_unit_similarity(mlp, unit_batch):
    sims = cosine_similarities(mlp, unit_batch, identity_generator)
    assert np.allclose(sims, 1.0, atol=1e-6)


def test_tiny_noise_keeps_similarity_high(mlp, unit_batch):
    sims = cosine_similarities(mlp, unit_batch, random_noise_generator(1e-4, seed=0))
    assert sims.mean() > 0.99


def test_histogram_csv(tmp_path, mlp, unit_batch):
    hists = similarity_distribution(mlp, unit_batch, {"id": identity_generator}, bins=10)
    hists["id"].to_csv(tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert rows[0] == ["bin_left", "bin_right", "count"] and len(rows) == 11
    assert sum(int(r[2]) for r in rows[1:]) == 10 and int(rows[-1][2]) == 10


def test_bound_holds_on_random_models(mlp64):
    g = torch.Generator().manual_seed(0)
    spec = AttackSpec(family="complete_ae", eps=0.05, alpha=0.02, steps=5, beta=0.7)
    gen = complete_ae_generator(spec, seed=1)
    for _ in range(10):
        x = torch.rand(12, 5, generator=g, dtype=torch.float64)
        z, p, mask = batch_bank(mlp64, x)
        xa = gen(mlp64, x)
        with torch.no_grad():
            za, la = mlp64(xa)
            kl = kl_divergence(p, torch.softmax(la, -1))
            ca, cn = wsd_loss(za, z, mask), wsd_loss(z, z, mask)
        checked, bad, _ = bound_violations(mlp64, x, xa, mask, 0.7, 0.5, kl, ca, cn)
        assert bad == 0 and checked == int((ca >= cn).sum())


def test_rho_gamma_statistics(mlp, unit_batch):
    y = np.zeros(10, dtype=np.int64)
    spec = AttackSpec(family="complete_ae", eps=0.05, alpha=0.02, steps=3)
    rg = empirical_rho_gamma(mlp, unit_batch, y, spec, beta=0.5)
    assert rg.violations == 0 and rg.gamma >= 0 and rg.rho == rg.a1
    terms = rg.hoeffding_terms(10, 100)
    assert terms["rho_bound"] >= rg.a1
    zero = empirical_rho_gamma(mlp, unit_batch, y, spec, beta=0.0)
    assert zero.checked == 0


def test_selection_ties_go_to_smallest():
    rows = [{"beta": b, "harmonic": 0.5} for b in (5.0, 0.0, 0.5)]
    assert _select(rows, "beta") == 0.0
    rows[2]["harmonic"] = 0.6
    assert _select(rows, "beta") == 0.5


def test_sweep_table_means():
    res = SweepResult([{"beta": 1.0, "harmonic": 0.2}, {"beta": 1.0, "harmonic": 0.4}], {}, "beta")
    assert res.table() == [{"beta": 1.0, "mean_harmonic": pytest.approx(0.3)}]


def test_unlabeled_fractions_validated(tiny_semi, tiny_config):
    with pytest.raises(ContractError):
        unlabeled_scaling_sweep(tiny_semi, [1.5], tiny_config)

import math

import numpy as np
import pytest
import torch

from wscat.exceptions import ContractError
from wscat.losses import (build_positive_set, cross_entropy, cw_margin, delta_distance, info_nce,
                          kl_divergence, positive_mask, sbar, similarity, similarity_matrix, supcon_loss,
                          wsd_loss, wsd_loss_maxapprox)


def direct_wsd(s, positives):
    """Hand summation of the mean negative log-ratio over the positives."""
    denom = sum(math.exp(v) for v in s)
    return -sum(math.log(math.exp(s[p]) / denom) for p in positives) / len(positives)


def bank_with_similarities(s, tau=1.0):
    """Unit query along e0 and a bank whose cosines to it are ``s * tau``."""
    cos = torch.tensor(s, dtype=torch.float64) * tau
    bank = torch.stack([cos, torch.sqrt(1 - cos ** 2)], 1)
    return torch.tensor([[1.0, 0.0]], dtype=torch.float64), bank


def test_cross_entropy_hand_value():
    assert cross_entropy(torch.tensor([0.7, 0.2, 0.1]), 1).item() == pytest.approx(1.609438, abs=1e-6)


def test_cross_entropy_one_hot_is_zero():
    assert cross_entropy(torch.eye(3), torch.arange(3)).abs().max() == 0


def test_cross_entropy_floor_and_range():
    assert cross_entropy(torch.tensor([1.0, 0.0]), 1).item() == pytest.approx(-math.log(1e-12))
    with pytest.raises(ContractError):
        cross_entropy(torch.tensor([[0.5, 0.5]]), torch.tensor([2]))


def test_kl_hand_value_and_self():
    p, q = torch.tensor([0.9, 0.1]), torch.tensor([0.6, 0.4])
    assert kl_divergence(p, q).item() == pytest.approx(0.226289, abs=1e-6)
    r = torch.softmax(torch.randn(20, 4), -1)
    assert kl_divergence(r, r).abs().max() < 1e-7


def test_kl_zero_mass_terms_vanish():
    assert kl_divergence(torch.tensor([1.0, 0.0]), torch.tensor([0.5, 0.5])).item() == pytest.approx(math.log(2))


@pytest.mark.parametrize("z1,z2,tau,expected", [
    ((1.0, 0.0), (1.0, 1.0), 1.0, 1 / math.sqrt(2)),
    ((1.0, 0.0), (0.0, 3.0), 0.5, 0.0),
    ((2.0, 0.0), (5.0, 0.0), 0.5, 2.0),
])
def test_similarity_hand_values(z1, z2, tau, expected):
    assert similarity(torch.tensor(z1), torch.tensor(z2), tau).item() == pytest.approx(expected, abs=1e-6)


def test_similarity_matrix_matches_pairwise():
    q, b = torch.randn(3, 4), torch.randn(5, 4)
    m = similarity_matrix(q, b, 0.5)
    for i in range(3):
        for n in range(5):
            assert m[i, n].item() == pytest.approx(similarity(q[i], b[n], 0.5).item(), abs=1e-6)


def test_positive_set_membership():
    assert build_positive_set(torch.tensor([0, 1, 0, 1, 0]), 2).tolist() == [0, 2, 4]
    assert build_positive_set(torch.tensor([3, 3, 3]), 1).tolist() == [0, 1, 2]
    assert build_positive_set(torch.tensor([1, 0, 0]), 0).tolist() == [0]


def test_info_nce_hand_value():
    q, bank = bank_with_similarities([1.0, 0.0, 0.0])
    val = info_nce(q, [0], bank, tau=0.5)  # s = (2, 0, 0)
    assert val.item() == pytest.approx(math.log(1 + 2 * math.exp(-2)), abs=1e-6)
    assert val.item() == pytest.approx(0.239545, abs=1e-6)


def test_wsd_three_member_bank_matches_direct_sum():
    s = [1.0, 0.5, -0.5]
    q, bank = bank_with_similarities(s)
    mask = positive_mask(torch.tensor([0, 0, 1]), torch.tensor([0]))
    val = wsd_loss(q, bank, mask, tau=1.0).item()
    assert val == pytest.approx(direct_wsd(s, [0, 1]), abs=1e-9)
    assert val == pytest.approx(0.854131, abs=1e-6)


def test_wsd_reductions():
    z = torch.randn(1, 4, dtype=torch.float64)
    assert wsd_loss(z, z, torch.ones(1, 1, dtype=torch.bool)).item() == pytest.approx(0.0, abs=1e-12)
    q, bank = bank_with_similarities([0.3] * 6)
    assert wsd_loss(q, bank, torch.ones(1, 6, dtype=torch.bool), 1.0).item() == pytest.approx(math.log(6))
    # single positive: identical to InfoNCE
    bank = torch.randn(7, 4, dtype=torch.float64)
    q = torch.randn(7, 4, dtype=torch.float64)
    eye = torch.eye(7, dtype=torch.bool)
    torch.testing.assert_close(wsd_loss(q, bank, eye), info_nce(q, torch.arange(7), bank))


def test_wsd_empty_positive_set_rejected():
    with pytest.raises(ContractError):
        wsd_loss(torch.randn(2, 3), torch.randn(4, 3), torch.zeros(2, 4, dtype=torch.bool))


def test_supcon_positive_set_swap():
    s = [1.0, 0.5, -0.5]
    q, bank = bank_with_similarities(s)
    pseudo = supcon_loss(q, [0], bank, torch.tensor([0, 0, 1]), tau=1.0).item()
    pred = wsd_loss(q, bank, positive_mask(torch.tensor([0, 1, 1]), torch.tensor([0])), 1.0).item()
    assert pseudo == pytest.approx(direct_wsd(s, [0, 1]), abs=1e-9)
    assert pred == pytest.approx(direct_wsd(s, [0]), abs=1e-9)
    assert pseudo != pytest.approx(pred)


def test_supcon_matches_wsd_when_labels_are_predictions():
    bank, q = torch.randn(6, 3), torch.randn(6, 3)
    labels = torch.tensor([0, 1, 0, 2, 1, 0])
    torch.testing.assert_close(supcon_loss(q, torch.arange(6), bank, labels),
                               wsd_loss(q, bank, positive_mask(labels, labels)))


def test_maxapprox_dominant_negative():
    q, bank = bank_with_similarities([0.0, 1.0])
    # scale the second similarity up to 5 by a temperature of 0.2
    mask = torch.tensor([[True, False]])
    approx = wsd_loss_maxapprox(q, bank, mask, tau=0.2).item()
    exact = wsd_loss(q, bank, mask, tau=0.2).item()
    assert approx == pytest.approx(5.0, abs=1e-9)
    assert exact == pytest.approx(math.log(1 + math.exp(5)), abs=1e-9)
    assert 0 <= exact - approx <= math.log(2)


def test_maxapprox_bank_of_one_is_zero():
    z = torch.randn(1, 3)
    assert wsd_loss_maxapprox(z, z, torch.ones(1, 1, dtype=torch.bool)).item() == 0.0


def test_sbar_and_delta_basics():
    z = torch.randn(1, 4, dtype=torch.float64)
    ones = torch.ones(1, 1, dtype=torch.bool)
    assert sbar(z, z, ones).item() == pytest.approx(0.0, abs=1e-12)
    bank = torch.randn(4, 4, dtype=torch.float64)
    mask = torch.tensor([[True, False, True, False]])
    q = torch.randn(1, 4, dtype=torch.float64)
    cos = torch.nn.functional.cosine_similarity(q, bank) / 0.5
    assert sbar(q, bank, mask).item() == pytest.approx(direct_wsd(cos.tolist(), [0, 2]), abs=1e-10)
    assert delta_distance(q, q, bank, mask).item() == 0.0


def test_cw_margin():
    logits = torch.tensor([[2.0, 0.5, 1.0], [0.0, 3.0, -1.0]])
    torch.testing.assert_close(cw_margin(logits, torch.tensor([0, 0])), torch.tensor([-1.0, 3.0]))


@pytest.mark.parametrize("seed", range(5))
def test_wsd_is_permutation_equivariant(seed):
    g = torch.Generator().manual_seed(seed)
    bank = torch.randn(8, 4, generator=g, dtype=torch.float64)
    q = torch.randn(8, 4, generator=g, dtype=torch.float64)
    labels = torch.randint(0, 3, (8,), generator=g)
    perm = torch.randperm(8, generator=g)
    a = wsd_loss(q, bank, positive_mask(labels, labels))
    b = wsd_loss(q, bank[perm], positive_mask(labels[perm], labels))
    torch.testing.assert_close(a, b)

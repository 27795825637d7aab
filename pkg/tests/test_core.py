import numpy as np
import pytest
import torch

from wscat.core import (CHECKPOINT_MAGIC, build_classifier, check_input, cosine_lr, forward, input_gradient,
                        load_checkpoint, make_sgd, parameter_vector, save_checkpoint)
from wscat.exceptions import ContractError, FormatError, NumericalError


def test_forward_probabilities_sum_to_one(mlp, unit_batch):
    z, p = forward(mlp, unit_batch)
    assert z.shape == (10, 5)
    assert torch.allclose(p.sum(-1), torch.ones(10), atol=1e-6)


def test_forward_rejects_bad_inputs(mlp):
    with pytest.raises(ContractError):
        forward(mlp, torch.rand(2, 7))
    with pytest.raises(ContractError):
        forward(mlp, torch.full((2, 6), 1.5))


def test_nonfinite_layer_is_named(mlp, unit_batch):
    with torch.no_grad():
        mlp.encoder[1].weight[0, 0] = float("nan")
    with pytest.raises(NumericalError, match="encoder.1"):
        forward(mlp, unit_batch)


def test_constant_loss_has_zero_gradient(unit_batch):
    g = input_gradient(lambda x: torch.tensor(3.0), unit_batch)
    assert torch.equal(g, torch.zeros_like(unit_batch))


def test_input_gradient_leaves_parameters_alone(mlp, unit_batch):
    input_gradient(lambda x: mlp.probs(x).sum(), unit_batch)
    assert all(p.grad is None for p in mlp.parameters())


def test_kl_gradient_matches_finite_differences(mlp64):
    from wscat.losses import kl_divergence
    g = torch.Generator().manual_seed(0)
    x0, x = torch.rand(1, 5, generator=g, dtype=torch.float64), torch.rand(1, 5, generator=g, dtype=torch.float64)
    p0 = mlp64.probs(x0).detach()
    f = lambda v: kl_divergence(p0, mlp64.probs(v)).sum()
    grad = input_gradient(f, x)
    h, fd = 1e-4, torch.zeros_like(x)
    for i in range(5):
        e = torch.zeros_like(x)
        e[0, i] = h
        fd[0, i] = (f(x + e) - f(x - e)) / (2 * h)
    assert ((grad - fd).abs().max() / fd.abs().max().clamp_min(1e-12)) < 1e-3


def test_conv_classifier_shapes():
    clf = build_classifier({"arch": "conv", "input_shape": [3, 8, 8], "n_classes": 4, "widths": [4, 8],
                            "embed_dim": 6}, seed=0)
    z, logits = clf(torch.rand(2, 3, 8, 8))
    assert z.shape == (2, 6) and logits.shape == (2, 4)


@pytest.mark.parametrize("desc,exc", [
    ({"arch": "wrn-28-10", "input_shape": [3, 32, 32], "n_classes": 10}, NotImplementedError),
    ({"arch": "resnet", "input_shape": [3], "n_classes": 2}, ContractError),
    ({"arch": "conv", "input_shape": [3, 8, 8], "n_classes": 2, "widths": [4]}, ContractError),
])
def test_unsupported_architectures(desc, exc):
    with pytest.raises(exc):
        build_classifier(desc)


def test_seeded_build_is_deterministic():
    d = {"arch": "mlp", "input_shape": [4], "n_classes": 2}
    assert torch.equal(parameter_vector(build_classifier(d, 3)), parameter_vector(build_classifier(d, 3)))


@pytest.mark.parametrize("double", [False, True])
def test_checkpoint_round_trip(tmp_path, mlp, unit_batch, double):
    clf = mlp.double() if double else mlp
    x = unit_batch.to(next(clf.parameters()).dtype)
    save_checkpoint(tmp_path / "m.ckpt", clf, epoch=4, extra={"note": "x"})
    back, info = load_checkpoint(tmp_path / "m.ckpt")
    assert info["epoch"] == 4 and info["extra"] == {"note": "x"}
    assert torch.equal(back(x)[1], clf(x)[1])


def test_checkpoint_rejects_garbage(tmp_path, mlp):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 20)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)
    save_checkpoint(path, mlp)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(CHECKPOINT_MAGIC) + 8 + 10])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.1, 0, 100) == pytest.approx(0.1)
    assert cosine_lr(0.1, 50, 100) == pytest.approx(0.05)
    assert cosine_lr(0.1, 100, 100) == pytest.approx(0.0)


def test_sgd_defaults(mlp):
    opt = make_sgd(mlp.parameters(), 0.1)
    group = opt.param_groups[0]
    assert group["nesterov"] and group["momentum"] == 0.9 and group["weight_decay"] == 5e-4


def test_check_input_accepts_boundaries(mlp):
    check_input(mlp, torch.tensor([[0.0, 1.0, 0.0, 1.0, 0.5, 0.5]]))

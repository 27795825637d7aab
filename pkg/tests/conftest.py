import numpy as np
import pytest
import torch

from wscat.core import build_classifier
from wscat.data import make_synthetic_rnr
from wscat.trainer import TrainConfig


@pytest.fixture
def mlp():
    return build_classifier({"arch": "mlp", "input_shape": [6], "n_classes": 3, "hidden": [8],
                             "embed_dim": 5}, seed=0)


@pytest.fixture
def mlp64():
    return build_classifier({"arch": "mlp", "input_shape": [5], "n_classes": 3, "hidden": [7],
                             "embed_dim": 4}, seed=1).double()


@pytest.fixture
def unit_batch():
    return torch.rand(10, 6, generator=torch.Generator().manual_seed(3))


@pytest.fixture(scope="session")
def tiny_semi():
    return make_synthetic_rnr(n_labeled=100, n_unlabeled=300, n_test=200, seed=0)


@pytest.fixture
def tiny_config():
    return TrainConfig(epochs=2, batch_size=32, seed=0, val_max=40)


ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str, seconds: float):
    ACCEPTANCE[number] = (passed, detail, seconds)
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} ({seconds:.1f}s) {detail}"
    print(line)
    return line


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail, seconds = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'} ({seconds:.1f}s) {detail}")

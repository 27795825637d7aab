import struct

import numpy as np
import pytest

from wscat.data import (LABELED, PSEUDO, AugmentedDataset, SyntheticRnRConfig, bayes_natural_accuracy,
                        dataset_hash, interleave_order, iter_batches, load_dataset, make_synthetic_rnr,
                        nr_only_robust_accuracy, oracle_access, robust_ceiling, save_dataset,
                        split_semisupervised)
from wscat.exceptions import ConfigError, FormatError, OracleAccessError


def test_cifar10_shaped_split_sizes():
    x = np.zeros((50000, 1), np.float32)
    y = np.arange(50000) % 10
    ds = split_semisupervised(x, y, 4000, 0.2, seed=0)
    assert (ds.n_labeled, len(ds.x_val), ds.n_unlabeled) == (3200, 800, 46000)


def test_split_is_a_pure_function_of_its_arguments():
    x = np.random.default_rng(0).random((300, 2)).astype(np.float32)
    y = np.arange(300) % 3
    a = split_semisupervised(x, y, 50, seed=5)
    b = split_semisupervised(x, y, 50, seed=5)
    assert a.meta["labeled_idx"] == b.meta["labeled_idx"]
    parts = a.meta["labeled_idx"] + a.meta["val_idx"] + a.meta["unlabeled_idx"]
    assert sorted(parts) == list(range(300))


@pytest.mark.parametrize("n_labeled", [0, 301])
def test_split_rejects_bad_sizes(n_labeled):
    with pytest.raises(ConfigError):
        split_semisupervised(np.zeros((300, 1)), np.zeros(300), n_labeled)


def test_discarded_labels_need_oracle_access(tiny_semi):
    with pytest.raises(OracleAccessError):
        tiny_semi.unlabeled_truth()
    with oracle_access():
        assert len(tiny_semi.unlabeled_truth()) == tiny_semi.n_unlabeled


def test_synthetic_oracles():
    cfg = SyntheticRnRConfig()
    from scipy.stats import norm
    assert robust_ceiling(cfg) == pytest.approx(norm.cdf(2.0))
    assert bayes_natural_accuracy(cfg) > 0.999
    assert nr_only_robust_accuracy(cfg) < 0.01
    ds = make_synthetic_rnr(cfg)
    assert ds.x_labeled.min() >= 0 and ds.x_labeled.max() <= 1


def test_synthetic_robust_block_classifier_hits_ceiling():
    cfg = SyntheticRnRConfig(n_test=20000, seed=4)
    ds = make_synthetic_rnr(cfg)
    # worst-case shift pushes the robust coordinate toward the boundary by eps
    signed = (ds.x_test[:, 0] - 0.5) * (2 * ds.y_test - 1) - cfg.eps
    assert (signed > 0).mean() == pytest.approx(robust_ceiling(cfg), abs=0.01)


@pytest.mark.parametrize("kwargs", [{"g_r": 1.5}, {"g_nr": 1.2}, {"k_r": 0}, {"k_r": 20, "k_nr": 20}])
def test_synthetic_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SyntheticRnRConfig(**kwargs)


def test_interleave_keeps_proportion():
    order = interleave_order(100, 400, np.random.default_rng(0))
    assert sorted(order.tolist()) == list(range(500))
    for batch in iter_batches(100, 400, 50, np.random.default_rng(0)):
        assert abs((batch < 100).sum() - 10) <= 1


def test_semi_round_trip(tmp_path, tiny_semi):
    save_dataset(tmp_path / "d.bin", tiny_semi)
    back = load_dataset(tmp_path / "d.bin")
    assert dataset_hash(back) == dataset_hash(tiny_semi)
    assert back.n_classes == 2


def test_augmented_round_trip(tmp_path):
    x = np.random.default_rng(0).random((6, 2, 3)).astype(np.float32)
    ds = AugmentedDataset(x, np.array([0, 1, 0, 1, 1, 0]), np.array([LABELED] * 2 + [PSEUDO] * 4, dtype=object),
                          2, "mt", {}, x[:1], np.array([0]), x[:2], np.array([0, 1]))
    save_dataset(tmp_path / "a.bin", ds)
    back = load_dataset(tmp_path / "a.bin")
    assert isinstance(back, AugmentedDataset)
    np.testing.assert_array_equal(back.x, x)
    assert back.n_labeled == 2 and list(back.tags[2:]) == [PSEUDO] * 4


def test_count_mismatch_names_both_numbers(tmp_path, tiny_semi):
    path = tmp_path / "d.bin"
    save_dataset(path, tiny_semi)
    raw = bytearray(path.read_bytes())
    count = struct.unpack("<I", raw[8:12])[0]
    raw[8:12] = struct.pack("<I", count + 1)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match=f"{count + 1}.*{count}"):
        load_dataset(path)


def test_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"garbage" * 10)
    with pytest.raises(FormatError, match="magic"):
        load_dataset(tmp_path / "x.bin")


def test_subsample_unlabeled(tiny_semi):
    assert tiny_semi.subsample_unlabeled(0.0).n_unlabeled == 0
    half = tiny_semi.subsample_unlabeled(0.5, seed=1)
    assert half.n_unlabeled == 150
    with pytest.raises(ConfigError):
        tiny_semi.subsample_unlabeled(1.5)

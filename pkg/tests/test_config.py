import pytest

from wscat.config import PROFILES, dump_config, parse_config, read_pairs
from wscat.exceptions import ConfigError


def test_profile_defaults():
    assert parse_config(profile="cifar10").train.lam == 5.0
    assert parse_config(profile="imagenet32-100").train.beta == 0.2
    syn = parse_config()
    assert syn.profile == "synthetic" and syn.synthetic.k_nr == 28


def test_fraction_budgets():
    cfg = parse_config(overrides=["attack.eps=8/255", "attack.alpha=2/255"])
    assert cfg.train_attack.eps == 8 / 255 and cfg.train_attack.alpha == 2 / 255


def test_layering(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nbeta = 0.3\nepochs = 5  # trailing\n")
    cfg = parse_config(path, ["epochs=7"])
    assert cfg.train.beta == 0.3 and cfg.train.epochs == 7


@pytest.mark.parametrize("overrides,match", [
    (["nonsense=1"], "nonsense"),
    (["epochs=many"], "expects int"),
    (["beta=0.1", "attack.beta=0.2"], "conflicting"),
    (["epochs=3", "epochs=4"], "conflicting"),
    (["data.profile=mnist"], "unknown profile"),
    (["attack.alpha=1"], "alpha"),
])
def test_rejections(overrides, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(overrides=overrides)


def test_attack_beta_alias():
    assert parse_config(overrides=["attack.beta=0.4"]).train.beta == 0.4


def test_missing_file_and_bad_line(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        parse_config(tmp_path / "nope.cfg")
    with pytest.raises(ConfigError, match=":2:"):
        read_pairs("a = 1\njunk\n")


def test_dump_round_trip(tmp_path):
    cfg = parse_config(overrides=["beta=0.7", "seed=3"])
    path = tmp_path / "dump.cfg"
    path.write_text(dump_config(cfg))
    again = parse_config(path)
    assert again.train == cfg.train


def test_every_profile_resolves():
    for name in PROFILES:
        parse_config(profile=name).train.validate()

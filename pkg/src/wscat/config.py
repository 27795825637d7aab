"""Flat ``key = value`` configuration with dotted namespaces and dataset profiles.

Example file::

    # training
    method = wscat
    beta = 0.05
    attack.eps = 8/255
    eval.steps = 20
    data.profile = synthetic

Unknown keys are rejected, values are type-checked, and budgets accept exact
fractions such as ``8/255``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

from .attacks import AttackSpec, parse_eps
from .data import SyntheticRnRConfig
from .exceptions import ConfigError, ContractError
from .trainer import TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _intlist(text: str) -> list[int]:
    return [int(t) for t in text.replace(" ", "").split(",") if t]


def _optint(text: str):
    return None if text.strip().lower() in ("", "none") else int(text)


def _optfloat(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _eps(text: str) -> float:
    try:
        return parse_eps(text)
    except ContractError as exc:
        raise ValueError(text) from exc


# key -> (converter, type name shown in errors)
SCHEMA = {
    "method": (str, "str"),
    "lam": (float, "float"),
    "beta": (float, "float"),
    "tau": (float, "float"),
    "epochs": (int, "int"),
    "batch_size": (int, "int"),
    "lr": (float, "float"),
    "momentum": (float, "float"),
    "nesterov": (_bool, "bool"),
    "weight_decay": (float, "float"),
    "cosine": (_bool, "bool"),
    "early_stop": (str, "str"),
    "seed": (int, "int"),
    "val_max": (_optint, "int or none"),
    "bound_check": (str, "str"),
    "arch.kind": (str, "str"),
    "arch.hidden": (_intlist, "comma-separated ints"),
    "arch.widths": (_intlist, "comma-separated ints"),
    "arch.embed_dim": (int, "int"),
    "arch.input_mean": (float, "float"),
    "arch.input_std": (float, "float"),
    "attack.family": (str, "str"),
    "attack.eps": (_eps, "decimal or fraction"),
    "attack.alpha": (_eps, "decimal or fraction"),
    "attack.steps": (int, "int"),
    "attack.random_start": (_bool, "bool"),
    "attack.beta": (float, "float"),
    "eval.eps": (_eps, "decimal or fraction"),
    "eval.alpha": (_eps, "decimal or fraction"),
    "eval.steps": (int, "int"),
    "eval.random_start": (_bool, "bool"),
    "mt.epochs": (_optint, "int or none"),
    "mt.decay": (float, "float"),
    "mt.consistency": (float, "float"),
    "mt.rampup": (float, "float"),
    "mt.jitter": (_optfloat, "float or none"),
    "data.profile": (str, "str"),
    "data.path": (str, "str"),
    "data.dstar": (str, "str"),
    "data.n_labeled": (int, "int"),
    "data.val_fraction": (float, "float"),
    "data.seed": (int, "int"),
    "synthetic.d": (int, "int"),
    "synthetic.k_r": (int, "int"),
    "synthetic.k_nr": (int, "int"),
    "synthetic.g_r": (float, "float"),
    "synthetic.g_nr": (float, "float"),
    "synthetic.sigma": (float, "float"),
    "synthetic.n_labeled": (int, "int"),
    "synthetic.n_unlabeled": (int, "int"),
    "synthetic.n_test": (int, "int"),
}

_COMMON = {
    "tau": "0.5", "momentum": "0.9", "nesterov": "true", "weight_decay": "5e-4", "cosine": "true",
    "early_stop": "harmonic", "seed": "0", "val_max": "none", "bound_check": "batch",
    "attack.family": "complete_ae", "attack.eps": "8/255", "attack.alpha": "2/255",
    "attack.steps": "10", "attack.random_start": "false",
    "eval.eps": "8/255", "eval.alpha": "1/255", "eval.steps": "20", "eval.random_start": "true",
    "mt.epochs": "none", "mt.decay": "0.99", "mt.consistency": "1.0", "mt.rampup": "0.25",
    "mt.jitter": "none", "data.val_fraction": "0.2", "data.seed": "0", "method": "wscat",
}

# Per-dataset splits and lam / beta; the image profiles keep the
# reference optimiser (lr 0.1, batch 128), the synthetic one is the desk profile.
PROFILES = {
    "synthetic": {
        **_COMMON, "lam": "1.0", "beta": "0.05", "epochs": "30", "batch_size": "64", "lr": "0.05",
        "arch.kind": "mlp", "arch.hidden": "64", "arch.embed_dim": "16",
        "arch.input_mean": "0.5", "arch.input_std": "0.05",
        "data.n_labeled": "400",
        "synthetic.d": "32", "synthetic.k_r": "1", "synthetic.k_nr": "28", "synthetic.g_r": "2.0",
        "synthetic.g_nr": "0.5", "synthetic.sigma": "0.5", "synthetic.n_labeled": "400",
        "synthetic.n_unlabeled": "4000", "synthetic.n_test": "1000",
    },
    "cifar10": {
        **_COMMON, "lam": "5.0", "beta": "0.05", "epochs": "30", "batch_size": "128", "lr": "0.1",
        "arch.kind": "conv", "arch.widths": "32,64,128", "arch.embed_dim": "128",
        "arch.input_mean": "0.5", "arch.input_std": "0.25", "data.n_labeled": "4000",
    },
    "cifar100": {
        **_COMMON, "lam": "1.0", "beta": "0.05", "epochs": "30", "batch_size": "128", "lr": "0.1",
        "arch.kind": "conv", "arch.widths": "32,64,128", "arch.embed_dim": "128",
        "arch.input_mean": "0.5", "arch.input_std": "0.25", "data.n_labeled": "10000",
    },
    "imagenet32-100": {
        **_COMMON, "lam": "1.0", "beta": "0.2", "epochs": "30", "batch_size": "128", "lr": "0.1",
        "arch.kind": "conv", "arch.widths": "32,64,128", "arch.embed_dim": "128",
        "arch.input_mean": "0.5", "arch.input_std": "0.25", "data.n_labeled": "10000",
    },
}


@dataclass
class ResolvedConfig:
    train: TrainConfig
    profile: str
    data: dict = field(default_factory=dict)
    synthetic: SyntheticRnRConfig | None = None
    flat: dict = field(default_factory=dict)

    @property
    def eval_attack(self) -> AttackSpec:
        return self.train.eval_attack

    @property
    def train_attack(self) -> AttackSpec:
        return self.train.train_attack

    def to_dict(self) -> dict:
        return {"profile": self.profile, "flat": self.flat, "train": self.train.to_dict(),
                "data": self.data, "synthetic": asdict(self.synthetic) if self.synthetic else None}


def read_pairs(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        out[key] = value
    return out


def _overrides_to_dict(overrides) -> dict:
    if overrides is None:
        return {}
    if isinstance(overrides, dict):
        return {k: str(v) for k, v in overrides.items()}
    out = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = (p.strip() for p in item.split("=", 1))
        if key in out and out[key] != value:
            raise ConfigError(f"conflicting overrides for {key!r}: {out[key]!r} vs {value!r}")
        out[key] = value
    return out


def _convert(key: str, value: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    conv, name = SCHEMA[key]
    try:
        return conv(value)
    except (TypeError, ValueError):
        raise ConfigError(f"key {key!r} expects {name}, got {value!r}") from None


def parse_config(path=None, overrides=None, profile: str | None = None) -> ResolvedConfig:
    """Resolve profile defaults < config file < CLI overrides into a full config.

    ``overrides`` is a mapping or a list of ``key=value`` strings.
    """
    file_pairs = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {str(p)!r} does not exist")
        file_pairs = read_pairs(p.read_text(), str(p))
    over = _overrides_to_dict(overrides)
    for key in list(file_pairs) + list(over):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
    profile = over.get("data.profile") or file_pairs.get("data.profile") or profile or "synthetic"
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    # attack.beta is an alias of beta; disagreeing values are a conflict
    for layer in (file_pairs, over):
        if "attack.beta" in layer:
            if "beta" in layer and float(layer["beta"]) != float(layer["attack.beta"]):
                raise ConfigError(f"conflicting values for beta ({layer['beta']}) and attack.beta "
                                  f"({layer['attack.beta']})")
            layer["beta"] = layer.pop("attack.beta")
    merged = {**PROFILES[profile], **file_pairs, **over, "data.profile": profile}
    values = {k: _convert(k, v) for k, v in merged.items()}

    arch = {"arch": values["arch.kind"], "embed_dim": values["arch.embed_dim"],
            "input_mean": values["arch.input_mean"], "input_std": values["arch.input_std"]}
    if "arch.hidden" in values:
        arch["hidden"] = values["arch.hidden"]
    if "arch.widths" in values:
        arch["widths"] = values["arch.widths"]
    try:
        train_attack = AttackSpec(family=values["attack.family"], eps=values["attack.eps"],
                                  alpha=values["attack.alpha"], steps=values["attack.steps"],
                                  random_start=values["attack.random_start"], beta=values["beta"],
                                  tau=values["tau"])
        eval_attack = AttackSpec(family="pgd", eps=values["eval.eps"], alpha=values["eval.alpha"],
                                 steps=values["eval.steps"], random_start=values["eval.random_start"],
                                 tau=values["tau"])
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    train = TrainConfig(
        method=values["method"], lam=values["lam"], beta=values["beta"], tau=values["tau"],
        epochs=values["epochs"], batch_size=values["batch_size"], lr=values["lr"],
        momentum=values["momentum"], nesterov=values["nesterov"], weight_decay=values["weight_decay"],
        cosine=values["cosine"], train_attack=train_attack, eval_attack=eval_attack,
        early_stop=values["early_stop"], seed=values["seed"], arch=arch, val_max=values["val_max"],
        bound_check=values["bound_check"], mt_epochs=values["mt.epochs"], mt_decay=values["mt.decay"],
        mt_consistency=values["mt.consistency"], mt_rampup=values["mt.rampup"],
        mt_jitter=values["mt.jitter"])
    data = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("data.")}
    synthetic = None
    if profile == "synthetic":
        syn = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("synthetic.")}
        synthetic = SyntheticRnRConfig(**syn, eps=values["attack.eps"], seed=values["data.seed"],
                                       val_fraction=values["data.val_fraction"])
    flat = {k: merged[k] for k in sorted(merged)}
    return ResolvedConfig(train, profile, data, synthetic, flat)


def dump_config(resolved: ResolvedConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in resolved.flat.items())

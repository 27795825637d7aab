"""Command-line entry point: ``wscat <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage / configuration error.
Every run gets its own directory under ``$WSCAT_RUNS_DIR`` (default
``./runs``) holding exactly one ``manifest.json``; the manifest is written
before any result so a crashed run is still identifiable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import uuid
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .analysis import (beta_sweep, complete_ae_generator, empirical_rho_gamma, identity_generator,
                       similarity_distribution, unlabeled_scaling_sweep)
from .attacks import AttackSpec, run_attack
from .config import PROFILES, ResolvedConfig, dump_config, parse_config
from .core import load_checkpoint, save_checkpoint
from .data import (AugmentedDataset, SemiDataset, dataset_hash, load_dataset, make_synthetic_rnr,
                   save_dataset, split_semisupervised)
from .exceptions import ConfigError, WSCATError
from .metrics import MetricsRecord, accuracy, config_hash, harmonic_mean, robust_accuracy
from .selftrain import build_dstar, train_mean_teacher
from .trainer import METHODS, fit, train_standard, train_trades, train_variant, train_wscat

log = logging.getLogger("wscat")

ATTACK_NAMES = ("natural", "fgsm", "pgd", "cw")


class UsageError(WSCATError):
    pass


# --------------------------------------------------------------------------
# run directories

def runs_root() -> Path:
    return Path(os.environ.get("WSCAT_RUNS_DIR", "runs"))


class Run:
    """A run directory with its manifest."""

    def __init__(self, command: str, args: dict, resolved: ResolvedConfig | None, out_dir=None,
                 dataset=None):
        self.command = command
        chash = config_hash({"command": command, "args": args,
                             "config": resolved.to_dict() if resolved else None})
        self.run_id = f"{command}-{chash[:8]}-{uuid.uuid4().hex[:6]}"
        self.dir = Path(out_dir) if out_dir else runs_root() / self.run_id
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = chash
        self.manifest = {
            "run_id": self.run_id,
            "command": command,
            "args": args,
            "config": resolved.to_dict() if resolved else None,
            "config_hash": chash,
            "seed": resolved.train.seed if resolved else args.get("seed"),
            "code_version": __version__,
            "torch_version": torch.__version__,
            "dataset_hash": dataset_hash(dataset) if dataset is not None else None,
            "start": time.time(),
            "end": None,
            "artifacts": {},
        }
        if resolved is not None:
            (self.dir / "config.txt").write_text(dump_config(resolved))
        self.write()

    def write(self):
        path = self.dir / "manifest.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True, default=str))
        tmp.replace(path)

    def artifact(self, name: str, path) -> Path:
        self.manifest["artifacts"][name] = str(path)
        return Path(path)

    def finish(self, **timing):
        self.manifest["end"] = time.time()
        if timing:
            self.manifest["timing"] = timing
        self.write()

    def record(self) -> MetricsRecord:
        return MetricsRecord(self.run_id, self.config_hash)


# --------------------------------------------------------------------------
# helpers

def _resolve(args) -> ResolvedConfig:
    overrides = list(getattr(args, "set", None) or [])
    for flag in ("method", "beta", "lam", "epochs", "seed"):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{flag}={value}")
    return parse_config(getattr(args, "config", None), overrides, getattr(args, "profile", None))


def _load_semi(path) -> SemiDataset:
    ds = load_dataset(path)
    if not isinstance(ds, SemiDataset):
        raise UsageError(f"{path} holds a pseudo-labeled dataset; pass the original --data")
    return ds


def _load_dstar(path) -> AugmentedDataset:
    ds = load_dataset(path)
    if not isinstance(ds, AugmentedDataset):
        raise UsageError(f"{path} is not a pseudo-labeled dataset; run `wscat pseudo-label` first")
    return ds


def _split(ds, which: str):
    if isinstance(ds, SemiDataset):
        table = {"test": (ds.x_test, ds.y_test), "val": (ds.x_val, ds.y_val),
                 "train": (ds.x_labeled, ds.y_labeled)}
    else:
        table = {"test": (ds.x_test, ds.y_test), "val": (ds.x_val, ds.y_val), "train": (ds.x, ds.y)}
    x, y = table[which]
    if x is None or len(x) == 0:
        raise UsageError(f"dataset has no {which!r} split")
    return x, y


def _eval_spec(name: str, resolved: ResolvedConfig) -> AttackSpec:
    base = resolved.eval_attack
    if name == "fgsm":
        return base.replace(family="fgsm", loss="ce", steps=1, alpha=base.eps, random_start=False)
    if name == "cw":
        return base.replace(family="cw", loss="cw")
    if name == "pgd":
        return base
    raise UsageError(f"unknown attack {name!r}; choose from {ATTACK_NAMES}")


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    resolved = _resolve(args)
    if resolved.profile == "synthetic":
        syn = resolved.synthetic
        if args.seed is not None:
            syn = type(syn)(**{**syn.__dict__, "seed": args.seed})
        ds = make_synthetic_rnr(syn)
    else:
        if not args.source:
            raise UsageError(f"profile {resolved.profile!r} needs --source <npz with x_train,y_train,x_test,y_test>")
        arrays = load_dataset(args.source, fmt="npz")
        ds = split_semisupervised(arrays["x_train"], arrays["y_train"], resolved.data["n_labeled"],
                                  resolved.data["val_fraction"], args.seed or resolved.data["seed"],
                                  arrays["x_test"], arrays["y_test"])
    save_dataset(args.out, ds)
    print(json.dumps({"out": str(args.out), "n_labeled": ds.n_labeled, "n_unlabeled": ds.n_unlabeled,
                      "n_val": len(ds.x_val), "n_test": len(ds.x_test), "hash": dataset_hash(ds)}))
    return 0


def cmd_pseudo_label(args):
    resolved = _resolve(args)
    semi = _load_semi(args.data)
    run = Run("pseudo-label", _args_dict(args), resolved, args.run_dir, semi)
    if args.labeler == "mt":
        labeler = train_mean_teacher(semi, resolved.train)
    else:
        labeler, _ = train_standard(semi.x_labeled, semi.y_labeled, resolved.train,
                                    x_val=semi.x_val, y_val=semi.y_val)
    dstar = build_dstar(semi, labeler, mode=args.labeler)
    save_checkpoint(run.artifact("labeler", run.dir / "labeler.ckpt"), labeler,
                    extra={"role": "pseudo-labeler", "mode": args.labeler})
    save_dataset(run.artifact("dstar", args.out), dstar)
    run.finish()
    print(json.dumps({"out": str(args.out), "run_dir": str(run.dir), "n": len(dstar)}))
    return 0


def _train_from(resolved, method, data_path, dstar_path, run, semi_kw=None):
    cfg = resolved.train.replace(method=method)
    kw = {"out_dir": run.dir, "run_id": run.run_id}
    if method in ("wscat", "wscat_fixed", "wscat_self"):
        if not dstar_path:
            raise UsageError(f"train --method {method} needs --dstar; run `wscat pseudo-label` first")
        dstar = _load_dstar(dstar_path)
        if method == "wscat":
            return train_wscat(dstar, cfg, **kw)
        semi = _load_semi(data_path) if data_path else None
        return train_variant(method, semi, cfg, dstar=dstar, **kw)
    if not data_path:
        raise UsageError(f"train --method {method} needs --data")
    semi = _load_semi(data_path)
    if method == "standard":
        return train_standard(semi.x_labeled, semi.y_labeled, cfg, x_val=semi.x_val, y_val=semi.y_val, **kw)
    if method == "trades":
        if dstar_path:
            return train_trades(_load_dstar(dstar_path), cfg, **kw)
        return train_trades(semi, cfg, **kw)
    return train_variant(method, semi, cfg, **kw)


def cmd_train(args):
    resolved = _resolve(args)
    method = resolved.train.method
    if method in ("wscat", "wscat_fixed", "wscat_self") and not args.dstar:
        raise UsageError(f"train --method {method} needs --dstar; run `wscat pseudo-label` first")
    ds = load_dataset(args.dstar) if args.dstar else load_dataset(args.data) if args.data else None
    run = Run("train", _args_dict(args), resolved, args.out, ds)
    t0 = time.perf_counter()
    clf, record = _train_from(resolved, method, args.data, args.dstar, run)
    record.run_id, record.config_hash = run.run_id, run.config_hash
    x_te, y_te = _split(ds, "test") if ds is not None and ds.x_test is not None and len(ds.x_test) else (None, None)
    if x_te is not None:
        nat = accuracy(clf, x_te, y_te)
        rob = robust_accuracy(clf, x_te, y_te, resolved.eval_attack, seed=resolved.train.seed)
        record.final = {"natural": nat, "pgd": rob}
        record.harmonic = harmonic_mean([nat, rob])
    save_checkpoint(run.artifact("model", run.dir / "model.ckpt"), clf,
                    extra={"run_id": run.run_id, "config_hash": run.config_hash})
    run.artifact("best", run.dir / "best.ckpt")
    run.artifact("last", run.dir / "last.ckpt")
    record.write_jsonl(run.artifact("metrics", run.dir / "metrics.jsonl"))
    (run.artifact("summary", run.dir / "summary.json")).write_text(json.dumps(record.summary(), indent=2))
    run.finish(train_seconds=time.perf_counter() - t0,
               epoch_seconds=[e.wall_time for e in record.epochs])
    print(json.dumps({"run_dir": str(run.dir), "best_epoch": record.best_epoch, **record.final}))
    return 0


def _load_model(path):
    clf, _ = load_checkpoint(path)
    return clf


def cmd_evaluate(args):
    resolved = _resolve(args)
    ds = load_dataset(args.data)
    clf = _load_model(args.ckpt)
    run = Run("evaluate", _args_dict(args), resolved, args.run_dir, ds)
    x, y = _split(ds, args.split)
    names = [a.strip() for a in args.attacks.split(",") if a.strip()]
    final = {}
    for name in names:
        if name == "natural":
            final[name] = accuracy(clf, x, y)
        else:
            final[name] = robust_accuracy(clf, x, y, _eval_spec(name, resolved), seed=resolved.train.seed)
    record = run.record()
    record.final = final
    record.harmonic = harmonic_mean(list(final.values())) if final else None
    summary = {"run_id": run.run_id, "config_hash": run.config_hash, "split": args.split,
               "accuracies": final, "harmonic_mean": record.harmonic}
    record.write_jsonl(run.artifact("metrics", run.dir / "metrics.jsonl"))
    out = Path(args.out) if args.out else run.dir / "summary.json"
    run.artifact("summary", out).write_text(json.dumps(summary, indent=2))
    run.finish()
    print(json.dumps(summary))
    return 0


def cmd_attack(args):
    resolved = _resolve(args)
    ds = load_dataset(args.data)
    clf = _load_model(args.ckpt)
    x, y = _split(ds, args.split)
    spec = _eval_spec(args.attack, resolved)
    xt = torch.as_tensor(x)
    x_adv = run_attack(clf, xt, torch.as_tensor(y), spec, torch.Generator().manual_seed(resolved.train.seed))
    np.savez(args.out, x_adv=x_adv.numpy(), x=x, y=y, eps=spec.eps)
    print(json.dumps({"out": str(args.out), "linf": float((x_adv - xt).abs().max())}))
    return 0


def cmd_analyze_similarity(args):
    resolved = _resolve(args)
    ds = load_dataset(args.data)
    clf = _load_model(args.ckpt)
    run = Run("analyze-similarity", _args_dict(args), resolved, args.run_dir, ds)
    x, y = _split(ds, args.split)
    spec = resolved.train_attack.replace(family="complete_ae")
    gens = {"identity": identity_generator,
            "kl_only": complete_ae_generator(spec.replace(beta=0.0), resolved.train.seed),
            f"complete_beta_{spec.beta:g}": complete_ae_generator(spec, resolved.train.seed)}
    hists = similarity_distribution(clf, x, gens, bins=args.bins)
    out_dir = Path(args.out) if args.out else run.dir
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, h in hists.items():
        h.to_csv(run.artifact(f"hist_{name}", out_dir / f"similarity_{name}.csv"))
    rg = empirical_rho_gamma(clf, x, y, spec, spec.beta, resolved.train.tau, resolved.train.lam,
                             seed=resolved.train.seed)
    summary = {"means": {k: h.mean for k, h in hists.items()}, "rho_gamma": rg.to_dict()}
    run.artifact("summary", out_dir / "similarity.json").write_text(json.dumps(summary, indent=2))
    run.finish()
    print(json.dumps(summary["means"]))
    return 0


def _parse_floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _parse_ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_sweep_beta(args):
    resolved = _resolve(args)
    semi = _load_semi(args.data)
    run = Run("sweep-beta", _args_dict(args), resolved, args.run_dir, semi)
    dstar = _load_dstar(args.dstar) if args.dstar else None
    res = beta_sweep(semi, _parse_floats(args.grid), resolved.train, _parse_ints(args.seeds), dstar=dstar)
    out = {"rows": res.rows, "selected": res.selected, "table": res.table()}
    path = Path(args.out) if args.out else run.dir / "sweep_beta.json"
    run.artifact("sweep", path).write_text(json.dumps(out, indent=2))
    run.finish()
    print(json.dumps({"selected": res.selected}))
    return 0


def cmd_sweep_unlabeled(args):
    resolved = _resolve(args)
    semi = _load_semi(args.data)
    run = Run("sweep-unlabeled", _args_dict(args), resolved, args.run_dir, semi)
    res = unlabeled_scaling_sweep(semi, _parse_floats(args.fractions), resolved.train, _parse_ints(args.seeds))
    out = {"rows": res.rows, "table": res.table()}
    path = Path(args.out) if args.out else run.dir / "sweep_unlabeled.json"
    run.artifact("sweep", path).write_text(json.dumps(out, indent=2))
    run.finish()
    print(json.dumps({"table": res.table()}))
    return 0


def cmd_export_embeddings(args):
    ds = load_dataset(args.data)
    clf = _load_model(args.ckpt)
    x, y = _split(ds, args.split)
    with torch.no_grad():
        z = clf.embed(torch.as_tensor(x)).numpy()
    np.savez(args.out, z=z, y=y)
    print(json.dumps({"out": str(args.out), "shape": list(z.shape)}))
    return 0


def cmd_rerun(args):
    manifest = json.loads(Path(args.manifest).read_text())
    argv = manifest["args"]
    ns = argparse.Namespace(**argv)
    for key in ("out", "run_dir"):
        if key in argv and argv[key] is not None:
            # outputs go to a fresh location next to the original
            setattr(ns, key, str(Path(args.out) / Path(argv[key]).name) if args.out else None)
    if manifest["command"] == "train" and ns.out is None:
        ns.out = str(runs_root() / f"rerun-{manifest['run_id']}")
    status = COMMANDS[manifest["command"]](ns)
    if args.verify and manifest["command"] == "train":
        old = Path(manifest["artifacts"]["metrics"])
        new = Path(ns.out) / "metrics.jsonl"
        diff = compare_metrics(old, new)
        print(json.dumps({"max_abs_diff": diff}))
        return 0 if diff <= 1e-6 else 1
    return status


def compare_metrics(path_a, path_b) -> float:
    """Largest absolute difference between matching ``(epoch, metric)`` rows."""
    from .metrics import read_jsonl

    def table(path):
        return {(r["epoch"], r["metric"]): r["value"] for r in read_jsonl(path)}

    a, b = table(path_a), table(path_b)
    if a.keys() != b.keys():
        return float("inf")
    return max((abs(float(a[k]) - float(b[k])) for k in a), default=0.0)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pseudo-label": cmd_pseudo_label,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "analyze-similarity": cmd_analyze_similarity,
    "sweep-beta": cmd_sweep_beta,
    "sweep-unlabeled": cmd_sweep_unlabeled,
    "export-embeddings": cmd_export_embeddings,
    "rerun": cmd_rerun,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wscat", description="Weakly supervised contrastive adversarial training lab")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, data=True, ckpt=False):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--profile", choices=sorted(PROFILES))
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--beta", type=float)
        p.add_argument("--lam", type=float)
        p.add_argument("--epochs", type=int)
        if data:
            p.add_argument("--data", required=True)
        if ckpt:
            p.add_argument("--ckpt", required=True)
            p.add_argument("--split", default="test", choices=("test", "val", "train"))

    p = sub.add_parser("gen-data", help="generate or split a dataset")
    common(p, data=False)
    p.add_argument("--source", help="npz archive for image profiles")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pseudo-label", help="train the pseudo-labeler and write D*")
    common(p)
    p.add_argument("--labeler", choices=("mt", "standard"), default="mt")
    p.add_argument("--out", required=True)
    p.add_argument("--run-dir", dest="run_dir")

    p = sub.add_parser("train", help="train a classifier")
    common(p, data=False)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--data")
    p.add_argument("--dstar")
    p.add_argument("--out", help="run directory")

    p = sub.add_parser("evaluate", help="natural and robust accuracy of a checkpoint")
    common(p, ckpt=True)
    p.add_argument("--attacks", default="natural,fgsm,pgd,cw")
    p.add_argument("--out")
    p.add_argument("--run-dir", dest="run_dir")

    p = sub.add_parser("attack", help="write adversarial examples")
    common(p, ckpt=True)
    p.add_argument("--attack", default="pgd", choices=("fgsm", "pgd", "cw"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze-similarity", help="embedding similarity histograms")
    common(p, ckpt=True)
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--out")
    p.add_argument("--run-dir", dest="run_dir")

    p = sub.add_parser("sweep-beta", help="beta sweep selected by validation harmonic mean")
    common(p)
    p.add_argument("--dstar")
    p.add_argument("--grid", required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out")
    p.add_argument("--run-dir", dest="run_dir")

    p = sub.add_parser("sweep-unlabeled", help="vary the fraction of unlabeled data")
    common(p)
    p.add_argument("--fractions", default="0,0.5,1")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out")
    p.add_argument("--run-dir", dest="run_dir")

    p = sub.add_parser("export-embeddings", help="dump encoder embeddings")
    common(p, ckpt=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", help="re-execute a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--verify", action="store_true", help="compare metrics with the original run")
    return parser


def _fail(kind: str, message: str):
    flat = " ".join(str(message).split())
    print(f"wscat: error={kind} message={json.dumps(flat)}", file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _fail("usage", exc)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        _fail(exc.__class__.__name__, exc)
        return 2
    except WSCATError as exc:
        _fail(exc.__class__.__name__, exc)
        return 1
    except (OSError, KeyError) as exc:
        _fail(exc.__class__.__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Datasets: semi-supervised splits, the synthetic robust/non-robust testbed,
the binary dataset container, and proportion-preserving batching.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .exceptions import ConfigError, FormatError, OracleAccessError

LABELED, UNLABELED, PSEUDO = "labeled", "unlabeled", "pseudo-labeled"
TAG_CODES = {LABELED: 0, UNLABELED: 1, PSEUDO: 2}
DATASET_MAGIC = b"WSCATDS1"

_ORACLE_DEPTH = 0


@contextlib.contextmanager
def oracle_access():
    """Temporarily allow reading the discarded labels of unlabeled data."""
    global _ORACLE_DEPTH
    _ORACLE_DEPTH += 1
    try:
        yield
    finally:
        _ORACLE_DEPTH -= 1


@dataclass
class SemiDataset:
    """``D = D_l ∪ D_u`` plus validation and test splits.

    Inputs are float32 arrays with entries in ``[0, 1]``. Labels of ``D_u`` are
    discarded; when the generator knows them they are kept behind
    :func:`oracle_access` for test-time checks only.
    """

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    meta: dict = field(default_factory=dict)
    _unlabeled_truth: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_labeled(self) -> int:
        return len(self.x_labeled)

    @property
    def n_unlabeled(self) -> int:
        return len(self.x_unlabeled)

    def __len__(self):
        return self.n_labeled + self.n_unlabeled

    @property
    def sample_shape(self):
        return tuple(self.x_labeled.shape[1:])

    def unlabeled_truth(self) -> np.ndarray:
        if _ORACLE_DEPTH == 0:
            raise OracleAccessError("discarded labels are readable only inside oracle_access()")
        if self._unlabeled_truth is None:
            raise OracleAccessError("ground truth for D_u is not available")
        return self._unlabeled_truth

    def subsample_unlabeled(self, fraction: float, seed: int = 0) -> "SemiDataset":
        """Keep a seeded ``fraction`` of ``D_u`` (used by the scaling sweep)."""
        if not 0 <= fraction <= 1:
            raise ConfigError(f"fraction must lie in [0, 1], got {fraction}")
        n = int(round(fraction * self.n_unlabeled))
        keep = np.sort(np.random.default_rng(seed).permutation(self.n_unlabeled)[:n])
        truth = None if self._unlabeled_truth is None else self._unlabeled_truth[keep]
        meta = dict(self.meta, unlabeled_fraction=fraction)
        return SemiDataset(self.x_labeled, self.y_labeled, self.x_unlabeled[keep],
                           self.x_val, self.y_val, self.x_test, self.y_test,
                           self.n_classes, meta, truth)


@dataclass
class AugmentedDataset:
    """``D* = D_l ∪ D_u*``: labeled examples first, then pseudo-labeled ones."""

    x: np.ndarray
    y: np.ndarray
    tags: np.ndarray  # array of tag strings, one per example
    n_classes: int
    labeler: str = "mt"
    meta: dict = field(default_factory=dict)
    x_val: np.ndarray | None = None
    y_val: np.ndarray | None = None
    x_test: np.ndarray | None = None
    y_test: np.ndarray | None = None

    def __len__(self):
        return len(self.x)

    @property
    def n_labeled(self) -> int:
        return int((self.tags == LABELED).sum())


# --------------------------------------------------------------------------
# splitting

def split_semisupervised(x, y, n_labeled: int, val_fraction: float = 0.2, seed: int = 0,
                         x_test=None, y_test=None, n_classes: int | None = None) -> SemiDataset:
    """Keep ``n_labeled`` labels (a ``val_fraction`` of them become validation),
    discard the rest.

    The partition is a pure function of ``(len(x), n_labeled, val_fraction, seed)``.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    n = len(x)
    if n_labeled > n or n_labeled < 1:
        raise ConfigError(f"n_labeled={n_labeled} must lie in [1, {n}]")
    if not 0 <= val_fraction < 1:
        raise ConfigError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n_labeled * val_fraction))
    lab, val, unl = perm[:n_labeled - n_val], perm[n_labeled - n_val:n_labeled], perm[n_labeled:]
    if x_test is None:
        x_test, y_test = x[:0], y[:0]
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    meta = {"split_seed": seed, "n_labeled_total": n_labeled, "val_fraction": val_fraction,
            "labeled_idx": lab.tolist(), "val_idx": val.tolist(), "unlabeled_idx": unl.tolist()}
    return SemiDataset(x[lab], y[lab], x[unl], x[val], y[val],
                       np.asarray(x_test, np.float32), np.asarray(y_test, np.int64),
                       n_classes, meta, y[unl])


# --------------------------------------------------------------------------
# synthetic robust / non-robust data

@dataclass(frozen=True)
class SyntheticRnRConfig:
    """Binary data with a robust block R and a non-robust block NR.

    Coordinates are ``sign(y) * margin * eps + N(0, sigma^2)`` mapped into
    ``[0, 1]`` by ``clip(0.5 + raw)``; R uses margin ``g_r`` (>= 2, cannot be
    flipped inside the ball), NR uses ``g_nr`` (<= 1, can). Remaining
    ``d - k_r - k_nr`` coordinates are pure noise. ``sigma`` is given in units
    of ``eps``.
    """

    d: int = 32
    k_r: int = 1
    k_nr: int = 28
    g_r: float = 2.0
    g_nr: float = 0.5
    sigma: float = 0.5
    eps: float = 8 / 255
    n_labeled: int = 100
    n_unlabeled: int = 2000
    n_test: int = 1000
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.g_r < 2:
            raise ConfigError(f"g_r must be >= 2, got {self.g_r}")
        if self.g_nr > 1:
            raise ConfigError(f"g_nr must be <= 1, got {self.g_nr}")
        if self.k_r < 1 or self.k_nr < 0 or self.k_r + self.k_nr > self.d:
            raise ConfigError("need k_r >= 1, k_nr >= 0 and k_r + k_nr <= d")
        if self.sigma < 0 or self.eps <= 0:
            raise ConfigError("need sigma >= 0 and eps > 0")


def _synthetic_draw(cfg: SyntheticRnRConfig, n: int, rng: np.random.Generator):
    y = rng.integers(0, 2, size=n)
    s = (2 * y - 1).astype(np.float64)[:, None]
    margins = np.zeros(cfg.d)
    margins[:cfg.k_r] = cfg.g_r
    margins[cfg.k_r:cfg.k_r + cfg.k_nr] = cfg.g_nr
    raw = s * margins[None, :] * cfg.eps + rng.normal(0.0, cfg.sigma * cfg.eps, size=(n, cfg.d))
    return np.clip(0.5 + raw, 0.0, 1.0).astype(np.float32), y.astype(np.int64)


def make_synthetic_rnr(cfg: SyntheticRnRConfig | None = None, **overrides) -> SemiDataset:
    cfg = cfg or SyntheticRnRConfig()
    if overrides:
        cfg = SyntheticRnRConfig(**{**asdict(cfg), **overrides})
    rng = np.random.default_rng(cfg.seed)
    n_val = int(round(cfg.n_labeled * cfg.val_fraction))
    n_lab = cfg.n_labeled - n_val
    x_l, y_l = _synthetic_draw(cfg, n_lab, rng)
    x_v, y_v = _synthetic_draw(cfg, n_val, rng)
    x_u, y_u = _synthetic_draw(cfg, cfg.n_unlabeled, rng)
    x_t, y_t = _synthetic_draw(cfg, cfg.n_test, rng)
    meta = {"generator": "synthetic_rnr", "config": asdict(cfg),
            "robust_ceiling": robust_ceiling(cfg), "bayes_natural": bayes_natural_accuracy(cfg)}
    return SemiDataset(x_l, y_l, x_u, x_v, y_v, x_t, y_t, 2, meta, y_u)


def robust_ceiling(cfg: SyntheticRnRConfig) -> float:
    """Robust accuracy of the R-block mean classifier under the worst-case shift.

    The worst ``||delta||_inf <= eps`` perturbation lowers every R coordinate's
    signed margin by ``eps``, so accuracy is ``Phi((g_r - 1) sqrt(k_r) / sigma)``
    (margins and sigma in units of eps). Clipping is ignored; it cannot bind
    for the default magnitudes.
    """
    if cfg.sigma == 0:
        return 1.0
    return float(norm.cdf((cfg.g_r - 1) * math.sqrt(cfg.k_r) / cfg.sigma))


def bayes_natural_accuracy(cfg: SyntheticRnRConfig) -> float:
    """Bayes accuracy on clean data: ``Phi(||mu|| / sigma)`` for the two Gaussians."""
    if cfg.sigma == 0:
        return 1.0
    snr = math.sqrt(cfg.k_r * cfg.g_r ** 2 + cfg.k_nr * cfg.g_nr ** 2) / cfg.sigma
    return float(norm.cdf(snr))


def nr_only_robust_accuracy(cfg: SyntheticRnRConfig) -> float:
    """Robust accuracy of the NR-block mean classifier; 0 whenever ``sigma = 0``."""
    if cfg.sigma == 0:
        return 1.0 if cfg.g_nr > 1 else 0.0
    return float(norm.cdf((cfg.g_nr - 1) * math.sqrt(max(cfg.k_nr, 1)) / cfg.sigma))


# --------------------------------------------------------------------------
# batching

def interleave_order(n_first: int, n_second: int, rng: np.random.Generator) -> np.ndarray:
    """Shuffled indices into ``[0, n_first + n_second)`` where every window
    keeps the global first/second proportion (up to one sample)."""
    a = rng.permutation(n_first)
    b = rng.permutation(n_second) + n_first
    pos_a = (np.arange(n_first) + 0.5) / max(n_first, 1)
    pos_b = (np.arange(n_second) + 0.5) / max(n_second, 1)
    keys = np.concatenate([pos_a, pos_b])
    idx = np.concatenate([a, b])
    return idx[np.argsort(keys, kind="stable")]


def iter_batches(n_first: int, n_second: int, batch_size: int, rng: np.random.Generator,
                 drop_last: bool = True):
    order = interleave_order(n_first, n_second, rng)
    n = len(order)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    for start in range(0, stop, batch_size):
        yield order[start:start + batch_size]


# --------------------------------------------------------------------------
# container

def dataset_hash(ds) -> str:
    h = hashlib.sha256()
    if isinstance(ds, SemiDataset):
        arrays = [ds.x_labeled, ds.y_labeled, ds.x_unlabeled, ds.x_val, ds.y_val, ds.x_test, ds.y_test]
    else:
        arrays = [ds.x, ds.y]
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def _shape_triple(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) > 3:
        raise FormatError(f"sample shape {shape} has more than three axes")
    return (1,) * (3 - len(shape)) + shape


def _or(a, default):
    return default if a is None else a


def save_dataset(path, ds) -> None:
    """Write a :class:`SemiDataset` or :class:`AugmentedDataset` container.

    Layout: magic, u32 sample count, u32 x3 shape, u32 class count,
    u32 manifest length, JSON manifest, float32 samples, int32 labels.
    """
    if isinstance(ds, SemiDataset):
        parts = [("labeled", ds.x_labeled, ds.y_labeled, LABELED),
                 ("unlabeled", ds.x_unlabeled, np.full(ds.n_unlabeled, -1), UNLABELED),
                 ("val", ds.x_val, ds.y_val, LABELED),
                 ("test", ds.x_test, ds.y_test, LABELED)]
        kind, shape = "semi", ds.sample_shape
    else:
        mask_l = ds.tags == LABELED
        empty_x, empty_y = ds.x[:0], ds.y[:0]
        parts = [("labeled", ds.x[mask_l], ds.y[mask_l], LABELED),
                 ("pseudo", ds.x[~mask_l], ds.y[~mask_l], PSEUDO),
                 ("val", _or(ds.x_val, empty_x), _or(ds.y_val, empty_y), LABELED),
                 ("test", _or(ds.x_test, empty_x), _or(ds.y_test, empty_y), LABELED)]
        kind, shape = "augmented", tuple(ds.x.shape[1:])
    splits, tags, xs, ys, offset = {}, [], [], [], 0
    for name, x, y, tag in parts:
        splits[name] = [offset, offset + len(x)]
        offset += len(x)
        tags.append(np.full(len(x), TAG_CODES[tag], dtype=np.int8))
        xs.append(np.asarray(x, np.float32).reshape(len(x), -1))
        ys.append(np.asarray(y, np.int32))
    manifest = {"kind": kind, "splits": splits, "sample_shape": list(shape),
                "tags": np.concatenate(tags).tolist(), "meta": ds.meta}
    if kind == "augmented":
        manifest["labeler"] = ds.labeler
    blob = json.dumps(manifest, sort_keys=True).encode()
    x_all = np.concatenate(xs) if xs else np.zeros((0, 1), np.float32)
    y_all = np.concatenate(ys)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIIII", offset, *_shape_triple(shape), ds.n_classes, len(blob)))
        fh.write(blob)
        fh.write(x_all.astype("<f4").tobytes())
        fh.write(y_all.astype("<i4").tobytes())


def load_dataset(path, fmt: str = "wscat"):
    """Load a dataset container (``fmt="wscat"``) or an ``.npz`` archive with
    ``x_train, y_train, x_test, y_test`` arrays (``fmt="npz"``; returned as a
    dict for :func:`split_semisupervised`). Fails closed: no partial dataset is
    ever returned."""
    if fmt == "npz":
        with np.load(path) as z:
            out = {k: z[k] for k in ("x_train", "y_train", "x_test", "y_test")}
        for key in ("x_train", "x_test"):
            x = out[key]
            if x.dtype == np.uint8:
                x = x.astype(np.float32) / 255.0
            if x.ndim == 4 and x.shape[-1] in (1, 3):
                x = np.transpose(x, (0, 3, 1, 2))
            out[key] = np.ascontiguousarray(x, dtype=np.float32)
        return out
    if fmt != "wscat":
        raise FormatError(f"unknown dataset format {fmt!r}")
    raw = Path(path).read_bytes()
    if raw[:8] != DATASET_MAGIC:
        raise FormatError("magic: not a WSCATDS1 container")
    if len(raw) < 32:
        raise FormatError("header: truncated")
    count, c, h, w, n_classes, mlen = struct.unpack("<IIIIII", raw[8:32])
    try:
        manifest = json.loads(raw[32:32 + mlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"manifest: {exc}") from exc
    feat = c * h * w
    body = raw[32 + mlen:]
    expected = count * feat * 4 + count * 4
    if len(body) != expected:
        have = len(body) // (feat * 4 + 4)
        raise FormatError(f"count: header declares {count} samples, file holds {have} "
                          f"({len(body)} of {expected} bytes)")
    tags = manifest.get("tags", [])
    if len(tags) != count:
        raise FormatError(f"count: manifest lists {len(tags)} tags for {count} samples")
    shape = tuple(manifest["sample_shape"])
    x_all = np.frombuffer(body[:count * feat * 4], dtype="<f4").reshape((count,) + shape).astype(np.float32)
    y_all = np.frombuffer(body[count * feat * 4:], dtype="<i4").astype(np.int64)
    sl = {k: slice(*v) for k, v in manifest["splits"].items()}
    if manifest["kind"] == "semi":
        return SemiDataset(x_all[sl["labeled"]], y_all[sl["labeled"]], x_all[sl["unlabeled"]],
                           x_all[sl["val"]], y_all[sl["val"]], x_all[sl["test"]], y_all[sl["test"]],
                           n_classes, manifest.get("meta", {}))
    codes = np.asarray(tags)
    names = np.array([LABELED, UNLABELED, PSEUDO], dtype=object)[codes]
    train = np.r_[sl["labeled"], sl["pseudo"]]
    return AugmentedDataset(x_all[train], y_all[train], names[train], n_classes,
                            manifest.get("labeler", "mt"), manifest.get("meta", {}),
                            x_all[sl["val"]], y_all[sl["val"]], x_all[sl["test"]], y_all[sl["test"]])

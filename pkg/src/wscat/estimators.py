"""scikit-learn style front end.

``WSCATClassifier`` wraps the full two-stage pipeline behind ``fit`` /
``predict`` / ``predict_proba`` / ``transform`` (embeddings). Unlabeled
training rows are marked with ``y = -1``, the scikit-learn semi-supervised
convention.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .attacks import AttackSpec
from .data import SemiDataset
from .exceptions import ConfigError
from .metrics import accuracy, robust_accuracy
from .selftrain import build_dstar, train_mean_teacher
from .trainer import METHODS, TrainConfig, train_standard, train_trades, train_variant, train_wscat

UNLABELED_MARK = -1


def check_inputs(X, *, n_features=None, estimator=None) -> np.ndarray:
    """Finite float32 array with at least two dimensions and entries in ``[0, 1]``."""
    X = check_array(X, dtype=np.float32, allow_nd=True, ensure_min_samples=1, estimator=estimator)
    if X.min() < 0 or X.max() > 1:
        raise ValueError("inputs must lie in [0, 1]")
    if n_features is not None and tuple(X.shape[1:]) != tuple(n_features):
        raise ValueError(f"expected samples of shape {tuple(n_features)}, got {tuple(X.shape[1:])}")
    return X


def check_semi_labels(y, n: int) -> np.ndarray:
    """Integer labels of length ``n``; ``-1`` marks unlabeled rows."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"y must be 1-D with {n} entries")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers (-1 for unlabeled)")
        y = y.astype(np.int64)
    if (y < UNLABELED_MARK).any():
        raise ValueError("labels must be >= 0, or -1 for unlabeled rows")
    if not (y >= 0).any():
        raise ValueError("at least one labeled row is required")
    return y.astype(np.int64)


class WSCATClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Adversarially trained classifier (``method`` picks the training recipe).

    Parameters mirror the flat configuration keys. ``validation_fraction`` of
    the labeled rows is held out for early stopping unless ``X_val``/``y_val``
    are passed to :meth:`fit`.

    Attributes after fitting: ``classifier_`` (torch module), ``record_``
    (training metrics), ``classes_``, ``transduction_`` (labels used for every
    training row, pseudo-labels included), ``n_features_in_``.
    """

    def __init__(self, method="wscat", lam=1.0, beta=0.05, tau=0.5, epochs=30, batch_size=64, lr=0.05,
                 eps=8 / 255, train_alpha=2 / 255, train_steps=10, eval_alpha=1 / 255, eval_steps=20,
                 hidden=(64,), embed_dim=16, input_mean=0.5, input_std=0.05, validation_fraction=0.2,
                 early_stop="harmonic", mt_epochs=None, random_state=0):
        self.method = method
        self.lam = lam
        self.beta = beta
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.eps = eps
        self.train_alpha = train_alpha
        self.train_steps = train_steps
        self.eval_alpha = eval_alpha
        self.eval_steps = eval_steps
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.input_mean = input_mean
        self.input_std = input_std
        self.validation_fraction = validation_fraction
        self.early_stop = early_stop
        self.mt_epochs = mt_epochs
        self.random_state = random_state

    def _config(self, ndim: int) -> TrainConfig:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        arch = {"arch": "mlp" if ndim == 1 else "conv", "embed_dim": int(self.embed_dim),
                "input_mean": float(self.input_mean), "input_std": float(self.input_std)}
        if ndim == 1:
            arch["hidden"] = [int(h) for h in self.hidden]
        train_attack = AttackSpec(family="complete_ae", eps=self.eps, alpha=self.train_alpha,
                                  steps=self.train_steps, beta=self.beta, tau=self.tau)
        eval_attack = AttackSpec(family="pgd", eps=self.eps, alpha=self.eval_alpha, steps=self.eval_steps,
                                 random_start=True, tau=self.tau)
        return TrainConfig(method=self.method, lam=self.lam, beta=self.beta, tau=self.tau, epochs=self.epochs,
                           batch_size=self.batch_size, lr=self.lr, train_attack=train_attack,
                           eval_attack=eval_attack, early_stop=self.early_stop, seed=self.random_state,
                           arch=arch, mt_epochs=self.mt_epochs)

    def _split(self, X, y, X_val, y_val):
        lab = np.flatnonzero(y >= 0)
        if X_val is None:
            rng = np.random.default_rng(self.random_state)
            perm = rng.permutation(lab)
            n_val = int(round(self.validation_fraction * len(lab)))
            val_idx, lab = np.sort(perm[:n_val]), np.sort(perm[n_val:])
            X_val, y_val = X[val_idx], self._encode(y[val_idx])
        else:
            X_val = check_inputs(X_val, n_features=X.shape[1:])
            y_val = self._encode(np.asarray(y_val))
        unl = np.flatnonzero(y < 0)
        empty = np.zeros((0, *X.shape[1:]), np.float32)
        return SemiDataset(X[lab], self._encode(y[lab]), X[unl], X_val, y_val, empty,
                           np.zeros(0, np.int64), len(self.classes_))

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        if (idx >= len(self.classes_)).any() or (self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y).any():
            raise ValueError("labels outside the classes seen in training")
        return idx.astype(np.int64)

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_inputs(X, estimator=self)
        y = check_semi_labels(y, len(X))
        self.classes_ = np.unique(y[y >= 0])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = tuple(X.shape[1:])
        cfg = self._config(X.ndim - 1)
        semi = self._split(X, y, X_val, y_val)
        method = cfg.method
        if method == "standard":
            clf, rec = train_standard(semi.x_labeled, semi.y_labeled, cfg, x_val=semi.x_val, y_val=semi.y_val)
            self.transduction_ = None
        elif method in ("wscat_sup", "wscat_std") or semi.n_unlabeled == 0 and method != "wscat":
            clf, rec = (train_trades(semi, cfg) if method == "trades" else train_variant(method, semi, cfg))
            self.transduction_ = None
        else:
            if semi.n_unlabeled == 0:
                raise ValueError(f"method {method!r} needs unlabeled rows (y = -1); use 'wscat_sup' otherwise")
            dstar = build_dstar(semi, train_mean_teacher(semi, cfg), "mt")
            if method == "trades":
                clf, rec = train_trades(dstar, cfg)
            elif method == "wscat":
                clf, rec = train_wscat(dstar, cfg)
            else:
                clf, rec = train_variant(method, semi, cfg, dstar=dstar)
            self.transduction_ = self.classes_[dstar.y]
        self.classifier_ = clf.eval()
        self.record_ = rec
        self.config_ = cfg
        return self

    def _tensor(self, X):
        check_is_fitted(self, "classifier_")
        X = check_inputs(X, n_features=self.input_shape_)
        return torch.as_tensor(X)

    def predict_proba(self, X):
        x = self._tensor(X)
        with torch.no_grad():
            return self.classifier_.probs(x).numpy()

    def predict(self, X):
        idx = self.predict_proba(X).argmax(1)
        return self.classes_[idx]

    def transform(self, X):
        """Encoder embeddings ``f(X)``."""
        x = self._tensor(X)
        with torch.no_grad():
            return self.classifier_.embed(x).numpy()

    def robust_score(self, X, y, attack: AttackSpec | None = None) -> float:
        """Accuracy under ``attack`` (the training-time evaluation PGD by default)."""
        x = self._tensor(X).numpy()
        return robust_accuracy(self.classifier_, x, self._encode(np.asarray(y)),
                               attack or self.config_.eval_attack, seed=self.random_state)

    def natural_score(self, X, y) -> float:
        x = self._tensor(X).numpy()
        return accuracy(self.classifier_, x, self._encode(np.asarray(y)))

"""scikit-learn compatible front end.

``X`` is an integer array of shape ``(n_samples, n_fields)`` holding per-field
feature indices (0 = out-of-vocabulary).  Numeric fields pass their values via
the ``values`` keyword; categorical entries default to 1.0.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Batch
from .enhancement import FieConfig, FreConfig
from .metrics import auc
from .model import FM_FAMILY, init_bundle, load_checkpoint, predict, predict_logits, save_checkpoint
from .semantics import FieldEmbeddingMatrix
from .training import TrainConfig, fit_bundle

_TRAIN_KEYS = ("learning_rate", "weight_decay", "batch_size", "max_epochs", "patience", "shuffle")


def check_indices(X, n_fields=None, vocab_sizes=None) -> np.ndarray:
    X = check_array(X, dtype=None, ensure_min_features=2)
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.mod(X, 1) == 0):
            raise ValueError("X must hold integer feature indices")
        X = X.astype(np.int64)
    X = X.astype(np.int64, copy=False)
    if np.any(X < 0):
        raise ValueError("feature indices must be non-negative")
    if n_fields is not None and X.shape[1] != n_fields:
        raise ValueError(f"X has {X.shape[1]} fields, expected {n_fields}")
    if vocab_sizes is not None:
        over = X >= np.asarray(vocab_sizes)[None, :]
        if over.any():
            k = int(np.flatnonzero(over.any(axis=0))[0])
            raise ValueError(f"field {k}: index {int(X[:, k].max())} exceeds vocabulary size {vocab_sizes[k]}")
    return X


def check_values(values, shape) -> np.ndarray:
    if values is None:
        return np.ones(shape)
    values = check_array(values, dtype=np.float64)
    if values.shape != shape:
        raise ValueError(f"values has shape {values.shape}, expected {shape}")
    return values


def check_labels(y, n) -> np.ndarray:
    y = np.asarray(y).ravel()
    if y.shape[0] != n:
        raise ValueError(f"y has {y.shape[0]} labels for {n} samples")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary 0/1 click labels")
    return y.astype(np.int64)


class FieldCTRClassifier(ClassifierMixin, BaseEstimator):
    """CTR model with optional field-semantic enhancements.

    Parameters
    ----------
    backbone : {"fm", "fwfm", "fmfm", "deepfm", "mlp"}
    embedding_dim : int
        Feature embedding size ``D``.
    hidden_units : tuple of int
        DNN widths for ``deepfm`` and ``mlp``.
    lambda_kl : float
        Weight of the embedding alignment loss; 0 disables it.
    alignment : {"kl", "mse", "cl"}
        Alignment loss variant.
    lambda_fm : float
        Weight of the field-guided interaction term; 0 disables it.
    fie_mode : {"auto", "explicit", "implicit", "off"}
        ``auto`` picks ``explicit`` for FM-family backbones and ``implicit``
        (plugin logit) for ``mlp``.
    field_embeddings : array of shape (n_fields, D_sem) or FieldEmbeddingMatrix
        Semantic field vectors; required when an enhancement is active.
    adaptor_init : {"uniform", "identity"}
    vocab_sizes : sequence of int, optional
        Rows per field embedding table; inferred from the training data when
        omitted.
    random_state : int
        Seeds initialization and shuffling.
    """

    def __init__(self, backbone="fm", embedding_dim=32, hidden_units=(300, 300, 128),
                 lambda_kl=0.0, alignment="kl", cl_temperature=0.02,
                 lambda_fm=0.0, fie_mode="auto", field_embeddings=None, adaptor_init="uniform",
                 learning_rate=1e-3, weight_decay=0.0, batch_size=256, max_epochs=20, patience=3,
                 shuffle=True, init_std=0.01, vocab_sizes=None, random_state=0):
        self.backbone = backbone
        self.embedding_dim = embedding_dim
        self.hidden_units = hidden_units
        self.lambda_kl = lambda_kl
        self.alignment = alignment
        self.cl_temperature = cl_temperature
        self.lambda_fm = lambda_fm
        self.fie_mode = fie_mode
        self.field_embeddings = field_embeddings
        self.adaptor_init = adaptor_init
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.shuffle = shuffle
        self.init_std = init_std
        self.vocab_sizes = vocab_sizes
        self.random_state = random_state

    def _fie_config(self) -> FieConfig:
        mode = self.fie_mode
        if mode == "auto":
            mode = "explicit" if self.backbone in FM_FAMILY else "implicit"
        if self.lambda_fm == 0:
            mode = "off"
        return FieConfig(float(self.lambda_fm), mode)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _TRAIN_KEYS}, seed=int(self.random_state))

    def _field_matrix(self):
        H = self.field_embeddings
        if isinstance(H, FieldEmbeddingMatrix):
            H = H.H
        return None if H is None else np.asarray(H, dtype=np.float64)

    def fit(self, X, y, values=None, eval_set=None, schema_digest=""):
        """Train with early stopping on ``eval_set = (X_val, y_val[, values_val])`` AUC."""
        X = check_indices(X)
        y = check_labels(y, X.shape[0])
        values = check_values(values, X.shape)
        if self.vocab_sizes is None:
            sizes = tuple(int(v) for v in X.max(axis=0) + 1)
        else:
            sizes = tuple(int(v) for v in self.vocab_sizes)
            check_indices(X, len(sizes), sizes)

        val = None
        if eval_set is not None:
            Xv, yv, *rest = eval_set
            Xv = check_indices(Xv, X.shape[1], sizes)
            val = Batch(Xv, check_values(rest[0] if rest else None, Xv.shape), check_labels(yv, Xv.shape[0]))
            if val.labels.min() == val.labels.max():
                raise ValueError("eval_set needs both classes to compute AUC")

        bundle = init_bundle(
            self.backbone, sizes, int(self.embedding_dim), tuple(self.hidden_units),
            fre=FreConfig(float(self.lambda_kl), self.alignment, float(self.cl_temperature)),
            fie=self._fie_config(), field_embeddings=self._field_matrix(), seed=int(self.random_state),
            init_std=float(self.init_std), adaptor_init=self.adaptor_init, schema_digest=schema_digest,
        )
        self.bundle_, self.run_record_ = fit_bundle(bundle, Batch(X, values, y), val, self._train_config())
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        self.vocab_sizes_ = sizes
        return self

    def decision_function(self, X, values=None):
        check_is_fitted(self, "bundle_")
        X = check_indices(X, self.n_features_in_, self.vocab_sizes_)
        return predict_logits(self.bundle_, X, check_values(values, X.shape))

    def predict_proba(self, X, values=None):
        p = predict(self.decision_function(X, values))
        return np.column_stack([1.0 - p, p])

    def predict(self, X, values=None):
        return (self.decision_function(X, values) > 0).astype(np.int64)

    def score_auc(self, X, y, values=None) -> float:
        return auc(y, self.decision_function(X, values))

    def save(self, path) -> None:
        check_is_fitted(self, "bundle_")
        meta = {"train": {k: getattr(self, k) for k in _TRAIN_KEYS},
                "random_state": int(self.random_state),
                "adaptor_init": self.adaptor_init,
                "init_std": float(self.init_std),
                "best_epoch": self.run_record_.best_epoch}
        save_checkpoint(self.bundle_, path, meta)

    @classmethod
    def load(cls, path) -> "FieldCTRClassifier":
        bundle, meta = load_checkpoint(path)
        est = cls(backbone=bundle.kind, embedding_dim=bundle.dim,
                  hidden_units=bundle.hidden_units or (300, 300, 128),
                  lambda_kl=bundle.fre.lambda_kl, alignment=bundle.fre.variant,
                  cl_temperature=bundle.fre.cl_temperature, lambda_fm=bundle.fie.lambda_fm,
                  fie_mode=bundle.fie.mode if bundle.fie.mode != "off" else "auto",
                  field_embeddings=bundle.field_embeddings, vocab_sizes=bundle.vocab_sizes,
                  random_state=meta.get("random_state", bundle.seed),
                  adaptor_init=meta.get("adaptor_init", "uniform"),
                  init_std=meta.get("init_std", 0.01), **meta.get("train", {}))
        est.bundle_ = bundle
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = bundle.K
        est.vocab_sizes_ = bundle.vocab_sizes
        return est

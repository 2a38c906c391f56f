"""Optimization: Adam with decoupled weight decay, early-stopped epochs, gradient checks."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import batch_indices
from .metrics import auc, logloss
from .model import ModelBundle, bce_from_logits, loss_and_grad, predict, predict_logits

logger = logging.getLogger(__name__)

WEIGHT_DECAY_GRID = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 0.0)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 256
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")


def bce_loss(labels, logits):
    """Mean BCE computed from logits; returns ``(loss, d loss / d logits)``."""
    return bce_from_logits(labels, logits)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3, weight_decay: float = 0.0):
    """One Adam update with bias correction and decoupled weight decay.

    Pure: returns new ``(params, state)`` and leaves the inputs untouched.
    Parameters without a gradient entry are treated as having zero gradient.
    """
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay:
            update = update + weight_decay * p
        new_params[name] = p - lr * update
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    wall_seconds: float = 0.0

    def summary(self) -> dict:
        best = self.epochs[self.best_epoch] if 0 <= self.best_epoch < len(self.epochs) else {}
        return {"summary": True, "best_epoch": self.best_epoch, "epochs_run": len(self.epochs),
                **{f"best_{k}": v for k, v in best.items() if k.startswith("val_")}}

    def write_jsonl(self, path) -> None:
        # wall-clock time is deliberately excluded so logs are reproducible
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in self.epochs:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            fh.write(json.dumps(self.summary(), sort_keys=True) + "\n")


def _evaluate(bundle, data):
    logits = predict_logits(bundle, data.indices, data.values)
    probs = predict(logits)
    return auc(data.labels, probs), logloss(data.labels, probs)


def fit_bundle(bundle: ModelBundle, train, val=None, cfg: TrainConfig = TrainConfig(), callback=None):
    """Train ``bundle`` on ``train`` with early stopping on validation AUC.

    ``train`` and ``val`` are anything exposing ``indices``, ``values`` and
    ``labels`` arrays (an encoded :class:`~fieldctr.data.Dataset` or a
    :class:`~fieldctr.data.Batch`).  Returns the best-epoch bundle (a copy)
    and the :class:`RunRecord`.  Without ``val`` every epoch runs and the last
    one is returned.
    """
    start = time.perf_counter()
    bundle = bundle.copy()
    state = AdamState()
    record = RunRecord()
    best_auc, best_params, wait = -np.inf, None, 0
    n = len(train.labels)
    for epoch in range(cfg.max_epochs):
        tot = bce_sum = align_sum = 0.0
        steps = 0
        for rows in batch_indices(n, cfg.batch_size, cfg.shuffle, [cfg.seed, epoch]):
            loss, parts, grads = loss_and_grad(bundle, train.indices[rows], train.values[rows], train.labels[rows])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {steps}: bce={parts['bce']}, align={parts['align']}"
                )
            bundle.params, state = adam_step(bundle.params, grads, state, cfg.learning_rate, cfg.weight_decay)
            tot += loss
            bce_sum += parts["bce"]
            align_sum += parts["align"]
            steps += 1
        row = {"epoch": epoch, "train_loss": tot / steps, "train_bce": bce_sum / steps,
               "train_align": align_sum / steps}
        if val is not None:
            row["val_auc"], row["val_logloss"] = _evaluate(bundle, val)
        record.epochs.append(row)
        logger.info("epoch %d: %s", epoch, row)
        if callback is not None:
            callback(row)

        if val is None:
            record.best_epoch = epoch
            continue
        if row["val_auc"] > best_auc:
            best_auc, wait = row["val_auc"], 0
            record.best_epoch = epoch
            best_params = {k: v.copy() for k, v in bundle.params.items()}
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    if best_params is not None:
        bundle.params = best_params
    record.wall_seconds = time.perf_counter() - start
    return bundle, record


@dataclass
class GradCheckReport:
    max_rel_error: dict
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values()) if self.max_rel_error else 0.0

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def as_dict(self):
        return asdict(self) | {"worst": self.worst, "passed": self.passed}


# relative errors use max(|analytic|, |numeric|, REL_FLOOR) as denominator so
# gradients at round-off scale do not dominate
REL_FLOOR = 1e-6


def grad_check(bundle: ModelBundle, batch, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients with central differences, entry by entry."""
    idx, x, y = batch.indices, batch.values, batch.labels
    _, _, grads = loss_and_grad(bundle, idx, x, y)
    probe = bundle.copy()
    report = {}
    for name, p in probe.params.items():
        g = grads.get(name, np.zeros_like(p))
        worst = 0.0
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_and_grad(probe, idx, x, y, need_grad=False)[0]
            flat[i] = orig - h
            lm = loss_and_grad(probe, idx, x, y, need_grad=False)[0]
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            ana = float(g.reshape(-1)[i])
            if num == ana:
                continue
            err = abs(num - ana) / max(abs(num), abs(ana), REL_FLOOR)
            worst = max(worst, err)
        report[name] = worst
    return GradCheckReport(report, tol)

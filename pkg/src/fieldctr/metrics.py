"""AUC, LogLoss and RelaImpr, plus the report type written by the CLI."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np


def _binary(labels):
    y = np.asarray(labels).ravel()
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return y.astype(np.int64)


def auc(labels, scores) -> float:
    """Mann-Whitney AUC with half credit for ties, in O(n log n).

    The statistic is accumulated on doubled ranks so the numerator is an exact
    integer; the result is bit-identical to :func:`auc_pairwise`.
    """
    y = _binary(labels)
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError(f"labels {y.shape} and scores {s.shape} differ in shape")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    # tie groups [start, end) in sorted order; doubled average rank = start + end + 1
    boundaries = np.flatnonzero(np.diff(s_sorted)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [s.size]))
    doubled = np.repeat(starts + ends + 1, ends - starts)
    rank2 = np.empty(s.size, dtype=np.int64)
    rank2[order] = doubled
    u2 = int(rank2[y == 1].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def auc_pairwise(labels, scores) -> float:
    """O(n^2) reference: count concordant and tied positive/negative pairs."""
    y = _binary(labels)
    s = np.asarray(scores, dtype=np.float64).ravel()
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    diff = pos[:, None] - neg[None, :]
    u2 = 2 * int(np.count_nonzero(diff > 0)) + int(np.count_nonzero(diff == 0))
    return u2 / (2 * pos.size * neg.size)


def logloss(labels, probabilities, clamp_eps: float = 1e-7) -> float:
    y = np.asarray(labels, dtype=np.float64).ravel()
    p = np.asarray(probabilities, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("logloss of an empty input is undefined")
    if y.shape != p.shape:
        raise ValueError(f"labels {y.shape} and probabilities {p.shape} differ in shape")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    p = np.clip(p, clamp_eps, 1.0 - clamp_eps)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def relaimpr(measured_auc: float, base_auc: float) -> float:
    """Relative AUC improvement over a base model, in percent."""
    if not base_auc > 0.5:
        raise ValueError(f"RelaImpr needs base AUC > 0.5, got {base_auc}")
    return ((measured_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0


@dataclass
class MetricsReport:
    auc: float
    logloss: float
    n_eval: int
    relaimpr_pct: float | None = None
    base_auc: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError(f"auc out of range: {self.auc}")
        if self.relaimpr_pct is not None and not (self.base_auc is not None and self.base_auc > 0.5):
            raise ValueError("relaimpr requires a base AUC > 0.5")

    def to_dict(self) -> dict:
        d = asdict(self)
        meta = d.pop("meta")
        d.update(meta)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self, columns) -> str:
        d = self.to_dict()
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(["" if d.get(c) is None else d.get(c) for c in columns])
        return buf.getvalue()


def evaluate(labels, probabilities, base_auc: float | None = None, **meta) -> MetricsReport:
    a = auc(labels, probabilities)
    rel = relaimpr(a, base_auc) if base_auc is not None else None
    return MetricsReport(a, logloss(labels, probabilities), int(np.size(labels)), rel, base_auc, meta)

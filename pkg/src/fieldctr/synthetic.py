"""Synthetic CTR tasks with known structure.

:class:`PlantedInteractionTask` draws uniformly distributed categorical
features and clicks whose log-odds depend on a few designated field pairs.
Each feature has a latent vector ``prototype[field] + noise``, so the task also
supplies ground-truth field prototypes for alignment experiments.  Because the
generator is fully known, its Bayes-optimal AUC can be computed exactly by
enumerating every combination of the fields that enter the click model.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .data import Batch, FieldSchema, FieldSpec
from .model import predict

_FIELD_NAMES = [
    ("user_income", "Annual income bracket of the user"),
    ("item_price", "Listed price band of the item"),
    ("user_age", "Age group of the user"),
    ("item_category", "Top-level category of the item"),
    ("context_hour", "Hour of day when the impression was shown"),
    ("device_type", "Type of device used for the session"),
    ("user_region", "Geographic region of the user"),
    ("item_brand", "Brand that manufactures the item"),
]


@dataclass
class PlantedInteractionTask:
    n_fields: int = 6
    n_values: int = 20
    latent_dim: int = 4
    pairs: tuple = ((0, 1), (2, 3))
    strength: float = 1.5
    bias: float = 0.0
    noise: float = 1.0
    seed: int = 0
    prototypes: np.ndarray = field(init=False, repr=False)
    latents: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.n_fields < 2 or self.n_fields > len(_FIELD_NAMES):
            raise ValueError(f"n_fields must be in [2, {len(_FIELD_NAMES)}]")
        rng = np.random.default_rng([self.seed, 0])
        self.prototypes = rng.standard_normal((self.n_fields, self.latent_dim))
        self.latents = self.prototypes[:, None, :] + self.noise * rng.standard_normal(
            (self.n_fields, self.n_values, self.latent_dim)
        )

    @property
    def schema(self) -> FieldSchema:
        return FieldSchema(tuple(FieldSpec(n, "categorical", d) for n, d in _FIELD_NAMES[: self.n_fields]))

    @property
    def vocab_sizes(self) -> list[int]:
        # index 0 stays reserved for OOV, values occupy 1..n_values
        return [self.n_values + 1] * self.n_fields

    @property
    def planted_names(self) -> list[tuple[str, str]]:
        names = self.schema.names
        return [(names[a], names[b]) for a, b in self.pairs]

    def logit(self, idx: np.ndarray) -> np.ndarray:
        """True click log-odds for 1-based feature indices of shape (n, K)."""
        idx = np.asarray(idx, dtype=np.int64)
        out = np.full(idx.shape[0], self.bias, dtype=np.float64)
        for a, b in self.pairs:
            ua = self.latents[a, idx[:, a] - 1]
            ub = self.latents[b, idx[:, b] - 1]
            out += self.strength * np.sum(ua * ub, axis=1) / self.latent_dim
        return out

    def sample(self, n: int, seed: int) -> Batch:
        rng = np.random.default_rng([self.seed, 1, seed])
        idx = rng.integers(1, self.n_values + 1, size=(n, self.n_fields))
        y = (rng.random(n) < predict(self.logit(idx))).astype(np.int64)
        return Batch(idx, np.ones((n, self.n_fields)), y)

    def bayes_auc(self) -> float:
        """Population AUC of scoring with the true click probability.

        Every combination of the fields used by the click model is equally
        likely; positive mass of a combination is ``p``, negative mass ``1-p``,
        and ties between equal probabilities earn half credit.
        """
        used = sorted({f for pair in self.pairs for f in pair})
        grid = np.array(list(itertools.product(range(1, self.n_values + 1), repeat=len(used))))
        idx = np.ones((grid.shape[0], self.n_fields), dtype=np.int64)
        idx[:, used] = grid
        return weighted_auc(predict(self.logit(idx)))


def weighted_auc(p: np.ndarray) -> float:
    """AUC of a population where each atom has click probability ``p`` and equal weight."""
    p = np.asarray(p, dtype=np.float64)
    order = np.argsort(p, kind="mergesort")
    ps = p[order]
    pos, neg = ps, 1.0 - ps
    uniq, start = np.unique(ps, return_index=True)
    end = np.append(start[1:], ps.size)
    neg_cum = np.concatenate(([0.0], np.cumsum(neg)))
    num = 0.0
    for s, e in zip(start, end):
        below = neg_cum[s]
        tied = neg_cum[e] - neg_cum[s]
        num += pos[s:e].sum() * (below + 0.5 * tied)
    return num / (pos.sum() * neg.sum())

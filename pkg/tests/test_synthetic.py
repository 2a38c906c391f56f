import itertools

import numpy as np
import pytest

from fieldctr.metrics import auc, auc_pairwise
from fieldctr.model import predict
from fieldctr.synthetic import PlantedInteractionTask, weighted_auc


def test_sample_is_seeded():
    task = PlantedInteractionTask(n_values=5, seed=2)
    a, b = task.sample(100, 0), task.sample(100, 0)
    np.testing.assert_array_equal(a.indices, b.indices)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.indices.min() >= 1 and a.indices.max() <= 5
    assert not np.array_equal(a.indices, task.sample(100, 1).indices)


def test_logit_uses_only_planted_pairs():
    task = PlantedInteractionTask(n_values=4, pairs=((0, 1),), seed=0)
    idx = np.ones((2, 6), dtype=int)
    idx[1, 2:] = 4
    assert task.logit(idx)[0] == task.logit(idx)[1]
    assert task.planted_names == [("user_income", "item_price")]


def test_weighted_auc_matches_expanded_population():
    # atoms with probabilities p expand to a population with integer counts
    p = np.array([0.25, 0.5, 0.5, 0.75])
    y, s = [], []
    for pi in p:
        pos = int(pi * 4)
        y += [1] * pos + [0] * (4 - pos)
        s += [pi] * 4
    assert weighted_auc(p) == pytest.approx(auc_pairwise(np.array(y), np.array(s)), abs=1e-15)


def test_bayes_auc_bounds_empirical_truth_scoring():
    task = PlantedInteractionTask(n_values=6, strength=2.0, seed=1)
    bayes = task.bayes_auc()
    assert 0.5 < bayes < 1.0
    data = task.sample(40000, 3)
    emp = auc(data.labels, task.logit(data.indices))
    assert emp == pytest.approx(bayes, abs=0.01)


def test_bayes_auc_brute_force_small():
    task = PlantedInteractionTask(n_values=3, pairs=((0, 1),), seed=4)
    grid = np.array(list(itertools.product(range(1, 4), repeat=2)))
    idx = np.ones((9, 6), dtype=int)
    idx[:, :2] = grid
    p = predict(task.logit(idx))
    num = den = 0.0
    for a in range(9):
        for b in range(9):
            w = p[a] * (1 - p[b])
            den += w
            num += w * (1.0 if p[a] > p[b] else 0.5 if p[a] == p[b] else 0.0)
    assert task.bayes_auc() == pytest.approx(num / den, abs=1e-14)

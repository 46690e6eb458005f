import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from blinddip.quality import emd_loss_torch
from blinddip.scores import BIN_SCORES, ScoreDistribution, emd_loss, mean_score


def dists():
    return st.lists(st.floats(0.0, 1.0), min_size=10, max_size=10).filter(lambda v: sum(v) > 1e-3).map(
        lambda v: ScoreDistribution(np.asarray(v) / np.sum(v))
    )


def test_bin_scores_fixed():
    assert BIN_SCORES.tolist() == [i - 0.5 for i in range(1, 11)]


@pytest.mark.parametrize("probs", [np.ones(9) / 9, -np.ones(10), np.full(10, 0.2)])
def test_invalid_distributions_rejected(probs):
    with pytest.raises(ValueError):
        ScoreDistribution(probs)


def test_mean_score_examples():
    assert mean_score(ScoreDistribution.one_hot(5)) == 4.5
    assert mean_score(ScoreDistribution.uniform()) == pytest.approx(5.0, abs=1e-12)
    p = np.zeros(10)
    p[0], p[1] = 0.2, 0.8
    assert mean_score(ScoreDistribution(p)) == pytest.approx(0.2 * 0.5 + 0.8 * 1.5, abs=1e-12)


def test_emd_examples():
    one, two, ten = (ScoreDistribution.one_hot(k) for k in (1, 2, 10))
    assert emd_loss(one, one) == 0.0
    assert emd_loss(one, two) == pytest.approx(math.sqrt(0.1), abs=1e-12)
    assert emd_loss(one, ten) == pytest.approx(math.sqrt(0.9), abs=1e-12)
    assert emd_loss(one, ten) > emd_loss(one, two)


def test_emd_one_hot_strictly_increasing_in_bin_distance():
    values = {}
    for i, j in itertools.combinations(range(1, 11), 2):
        values[(i, j)] = emd_loss(ScoreDistribution.one_hot(i), ScoreDistribution.one_hot(j))
        # CDFs differ by 1 on exactly |i - j| of the 10 points
        assert values[(i, j)] == pytest.approx(math.sqrt((j - i) / 10), abs=1e-12)
    assert len(values) == 45
    by_distance = {}
    for (i, j), v in values.items():
        by_distance.setdefault(j - i, []).append(v)
    ds = sorted(by_distance)
    for a, b in zip(ds, ds[1:]):
        assert max(by_distance[a]) < min(by_distance[b])


@settings(max_examples=200, deadline=None)
@given(dists(), dists())
def test_emd_symmetric_and_nonnegative(p, q):
    assert emd_loss(p, q) == pytest.approx(emd_loss(q, p), abs=1e-15)
    assert emd_loss(p, q) >= 0.0


@settings(max_examples=100, deadline=None)
@given(dists())
def test_emd_zero_on_identity(p):
    assert emd_loss(p, p) <= 1e-9


@settings(max_examples=100, deadline=None)
@given(dists())
def test_mean_score_in_range(p):
    assert 0.5 - 1e-12 <= mean_score(p) <= 9.5 + 1e-12


def test_torch_batch_emd_agrees_with_reference(rng):
    p = rng.dirichlet(np.ones(10), size=16)
    q = rng.dirichlet(np.ones(10), size=16)
    ref = np.mean([emd_loss(ScoreDistribution(a), ScoreDistribution(b)) for a, b in zip(p, q)])
    got = float(emd_loss_torch(torch.tensor(p), torch.tensor(q)))
    assert got == pytest.approx(ref, abs=1e-9)

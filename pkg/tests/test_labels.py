import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blinddip.labels import (
    PSNR_CAP_DB,
    DegenerateRangeError,
    LabelGenConfig,
    compute_psnr,
    config_for,
    label_corpus,
    mu_to_distribution,
    psnr_to_mu,
    sample_histogram,
)
from blinddip.scores import mean_score


def brute_force_psnr(a, b):
    total, n = 0.0, 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        total += (x - y) ** 2
        n += 1
    return 10 * math.log10(1.0 / (total / n))


def test_psnr_identical_is_capped():
    img = np.full((4, 4, 3), 0.3)
    assert compute_psnr(img, img) == PSNR_CAP_DB == 100.0


def test_psnr_uniform_offset():
    a = np.full((8, 8, 3), 0.5)
    assert compute_psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_brute_force(rng):
    for _ in range(5):
        a, b = rng.random((13, 7, 3)), rng.random((13, 7, 3))
        assert compute_psnr(a, b) == pytest.approx(brute_force_psnr(a, b), abs=1e-9)


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        compute_psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_psnr_to_mu_endpoints_and_midpoint():
    cfg = LabelGenConfig(30.0, 40.0)
    assert psnr_to_mu(30.0, cfg) == 2.5
    assert psnr_to_mu(40.0, cfg) == 7.5
    assert psnr_to_mu(35.0, cfg) == pytest.approx(5.0, abs=1e-12)
    # out-of-range inputs clamp
    assert psnr_to_mu(10.0, cfg) == 2.5
    assert psnr_to_mu(99.0, cfg) == 7.5


def test_psnr_to_mu_affine_increasing(rng):
    cfg = LabelGenConfig(21.3, 33.9)
    xs = np.sort(rng.uniform(cfg.min_psnr, cfg.max_psnr, 50))
    mus = np.array([psnr_to_mu(x, cfg) for x in xs])
    assert np.all(np.diff(mus) > 0)
    slope = 5.0 / (cfg.max_psnr - cfg.min_psnr)
    assert np.allclose(mus, 2.5 + (xs - cfg.min_psnr) * slope, atol=1e-12)


def test_degenerate_range_rejected():
    with pytest.raises(DegenerateRangeError):
        LabelGenConfig(30.0, 30.0)
    with pytest.raises(DegenerateRangeError):
        config_for([31.0, 31.0, 31.0])


def test_histogram_counts_sum_to_m(rng):
    for mu in (0.0, 2.5, 5.0, 9.9, 12.0):
        counts = sample_histogram(mu, 1.5, 12345, rng)
        assert counts.sum() == 12345
        assert counts.shape == (10,)


def test_distribution_normalized(rng):
    cfg = LabelGenConfig(0.0, 1.0, M=777)
    d = mu_to_distribution(3.3, cfg, rng)
    assert abs(d.probs.sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("mu", [3.5, 5.0, 6.5])
def test_monte_carlo_mean_interior(mu):
    cfg = LabelGenConfig(0.0, 1.0, M=1_000_000)
    d = mu_to_distribution(mu, cfg, np.random.default_rng(7))
    assert abs(mean_score(d) - mu) < 0.02


def test_symmetry_about_centre():
    cfg = LabelGenConfig(0.0, 1.0, M=1_000_000)
    p = mu_to_distribution(5.0, cfg, np.random.default_rng(11)).probs
    assert np.all(np.abs(p - p[::-1]) < 0.005)


def test_label_corpus_endpoints_and_determinism():
    records = [("a", 30.0), ("b", 33.0), ("c", 40.0)]
    cfg = config_for([p for _, p in records], M=2000, seed=5)
    first = label_corpus(records, cfg)
    assert first[0].mu == 2.5 and first[2].mu == 7.5
    again = label_corpus(records, cfg)
    for x, y in zip(first, again):
        assert np.array_equal(x.target.probs, y.target.probs)


def test_label_corpus_rejects_empty_and_mismatched():
    with pytest.raises(ValueError):
        label_corpus([], LabelGenConfig(0.0, 1.0))
    with pytest.raises(ValueError):
        label_corpus([("a", 0.5)], LabelGenConfig(0.0, 1.0))


@settings(max_examples=300, deadline=None)
@given(st.floats(0.0, 10.0), st.integers(1, 5000), st.integers(0, 2**32 - 1))
def test_target_sums_to_one_exactly(mu, M, seed):
    cfg = LabelGenConfig(0.0, 1.0, M=M)
    dist = mu_to_distribution(mu, cfg, np.random.default_rng(seed))
    counts = sample_histogram(mu, 1.5, M, np.random.default_rng(seed))
    assert dist.probs.sum() == 1.0
    # the correction only absorbs rounding error
    assert np.max(np.abs(dist.probs - counts / M)) < 1e-14

"""Ten-bin quality-score histograms and the distances defined on them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NUM_BINS = 10
# bin i covers [i-1, i); scores are the bin centres 0.5 ... 9.5
BIN_SCORES = np.arange(NUM_BINS, dtype=np.float64) + 0.5
BIN_EDGES = np.arange(NUM_BINS + 1, dtype=np.float64)
SUM_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class ScoreDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64).reshape(-1).copy()
        if p.shape != (NUM_BINS,):
            raise ValueError(f"expected {NUM_BINS} probabilities, got {p.shape[0]}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0:
            raise ValueError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > SUM_TOL:
            raise ValueError(f"probabilities sum to {p.sum():.9f}, not 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def one_hot(cls, bin_number: int) -> "ScoreDistribution":
        """One-hot distribution; ``bin_number`` is 1-based like the score bins."""
        if not 1 <= bin_number <= NUM_BINS:
            raise ValueError(f"bin_number must be in 1..{NUM_BINS}")
        p = np.zeros(NUM_BINS)
        p[bin_number - 1] = 1.0
        return cls(p)

    @classmethod
    def uniform(cls) -> "ScoreDistribution":
        return cls(np.full(NUM_BINS, 1.0 / NUM_BINS))

    @property
    def bin_scores(self) -> np.ndarray:
        return BIN_SCORES

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs)

    def tolist(self) -> list[float]:
        return [float(v) for v in self.probs]

    def __eq__(self, other):
        if not isinstance(other, ScoreDistribution):
            return NotImplemented
        return bool(np.array_equal(self.probs, other.probs))

    def __repr__(self):
        return f"ScoreDistribution({np.array2string(self.probs, precision=4)})"


def mean_score(dist: ScoreDistribution) -> float:
    return float(np.dot(BIN_SCORES, dist.probs))


def emd_loss(p: ScoreDistribution, p_hat: ScoreDistribution) -> float:
    """Root-mean-square difference of the two cumulative distributions."""
    diff = np.cumsum(p.probs) - np.cumsum(p_hat.probs)
    return float(np.sqrt(np.mean(diff**2)))

"""Online auto-stop rule: causal smoothing, coarse peak under patience, local raw argmax."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class StopPolicy:
    smoothing_window: int = 15
    patience: int = 30
    search_radius: int = 30
    min_evals: int = 50

    def __post_init__(self):
        if self.smoothing_window < 1:
            raise ValueError("smoothing_window must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.search_radius < 0:
            raise ValueError("search_radius must be >= 0")
        if self.min_evals < self.smoothing_window:
            raise ValueError("min_evals must be >= smoothing_window")

    @property
    def retention(self) -> int:
        """Scored steps a caller must keep to serve any final choice.

        A late ``min_evals`` can hold the declaration past ``patience``, so it
        bounds the look-back too.
        """
        return max(self.patience, self.min_evals) + self.search_radius + self.smoothing_window


def smooth(raw_scores: Sequence[float], window: int) -> np.ndarray:
    """Causal moving average: ``out[t] = mean(raw[max(0, t-W+1) : t+1])``."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = np.asarray(raw_scores, dtype=np.float64)
    return np.array([np.mean(x[max(0, t - window + 1) : t + 1]) for t in range(x.size)])


class PeakDetector:
    """Running-maximum tracker fed one smoothed value at a time."""

    def __init__(self, patience: int, min_evals: int):
        self.patience = patience
        self.min_evals = min_evals
        self.best_index: int | None = None
        self.best_value = -np.inf
        self.stale = 0
        self.seen = 0

    def update(self, value: float) -> int | None:
        """Feed the next value; return the coarse peak index once declared."""
        t = self.seen
        self.seen += 1
        if value > self.best_value:
            # strict: ties keep the earliest index
            self.best_value = value
            self.best_index = t
            self.stale = 0
        else:
            self.stale += 1
        if self.stale >= self.patience and self.seen >= self.min_evals:
            return self.best_index
        return None


def detect_coarse_peak(smoothed: Sequence[float], policy: StopPolicy) -> tuple[int, int] | None:
    """Return ``(peak_index, declared_at)`` or None if the stream never declares."""
    det = PeakDetector(policy.patience, policy.min_evals)
    for t, v in enumerate(smoothed):
        peak = det.update(float(v))
        if peak is not None:
            return peak, t
    return None


def fine_search(raw_scores: Sequence[float], coarse_index: int, radius: int) -> int:
    x = np.asarray(raw_scores, dtype=np.float64)
    if not 0 <= coarse_index < x.size:
        raise IndexError(f"coarse_index {coarse_index} outside stream of length {x.size}")
    lo = max(0, coarse_index - radius)
    hi = min(x.size, coarse_index + radius + 1)
    return lo + int(np.argmax(x[lo:hi]))


@dataclass
class StopDecision:
    final_index: int
    declared_at: int | None
    coarse_index: int
    raw: list[float] = field(default_factory=list)
    smoothed: list[float] = field(default_factory=list)

    @property
    def no_peak_declared(self) -> bool:
        return self.declared_at is None

    def to_dict(self) -> dict:
        return {
            "final_index": self.final_index,
            "declared_at": self.declared_at,
            "coarse_index": self.coarse_index,
            "no_peak_declared": self.no_peak_declared,
            "raw": self.raw,
            "smoothed": self.smoothed,
        }


class StopController:
    """Single-run state machine; call :meth:`update` once per scored snapshot.

    ``update`` returns True on the step the coarse peak is declared, which is
    the engine's cue to stop. :meth:`decision` then gives the chosen index.
    """

    def __init__(self, policy: StopPolicy | None = None):
        self.policy = policy or StopPolicy()
        self.raw: list[float] = []
        self.smoothed: list[float] = []
        self._detector = PeakDetector(self.policy.patience, self.policy.min_evals)
        self.declared_at: int | None = None
        self.coarse_index: int | None = None

    def update(self, score: float) -> bool:
        if self.declared_at is not None:
            raise RuntimeError("controller already declared a stop")
        w = self.policy.smoothing_window
        self.raw.append(float(score))
        # same arithmetic as smooth() so online and offline values agree bitwise
        s = float(np.mean(np.asarray(self.raw[-w:], dtype=np.float64)))
        self.smoothed.append(s)
        peak = self._detector.update(s)
        if peak is not None:
            self.coarse_index = peak
            self.declared_at = len(self.raw) - 1
            return True
        return False

    def decision(self) -> StopDecision:
        if not self.raw:
            raise ValueError("no scores received")
        if self.declared_at is not None:
            coarse = self.coarse_index
        else:
            coarse = int(np.argmax(self.smoothed))
        final = fine_search(self.raw, coarse, self.policy.search_radius)
        return StopDecision(final, self.declared_at, coarse, list(self.raw), list(self.smoothed))


def run_policy(scores: Sequence[float], policy: StopPolicy) -> StopDecision:
    """Feed a score stream through a fresh controller, stopping at declaration."""
    ctl = StopController(policy)
    for s in scores:
        if ctl.update(s):
            break
    return ctl.decision()

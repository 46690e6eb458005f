"""PSNR metric and conversion of PSNR into synthetic score-histogram targets."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .images import validate_image
from .scores import NUM_BINS, ScoreDistribution

PSNR_CAP_DB = 100.0
MU_LOW, MU_SPAN = 2.5, 5.0


class DegenerateRangeError(ValueError):
    pass


def compute_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for [0, 1] images. Zero MSE returns ``PSNR_CAP_DB``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))


@dataclass(frozen=True)
class LabelGenConfig:
    min_psnr: float
    max_psnr: float
    sigma: float = 1.5
    M: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if not self.max_psnr > self.min_psnr:
            raise DegenerateRangeError(
                f"max_psnr ({self.max_psnr}) must exceed min_psnr ({self.min_psnr})"
            )
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")

    @property
    def bin_edges(self) -> list[int]:
        return list(range(NUM_BINS + 1))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bin_edges"] = self.bin_edges
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LabelGenConfig":
        return cls(
            min_psnr=float(d["min_psnr"]),
            max_psnr=float(d["max_psnr"]),
            sigma=float(d.get("sigma", 1.5)),
            M=int(d.get("M", 100_000)),
            seed=int(d.get("seed", 0)),
        )


def psnr_to_mu(psnr: float, config: LabelGenConfig) -> float:
    lo, hi = config.min_psnr, config.max_psnr
    if not hi > lo:
        raise DegenerateRangeError("degenerate PSNR range")
    clamped = min(max(float(psnr), lo), hi)
    return (clamped - lo) / (hi - lo) * MU_SPAN + MU_LOW


def sample_histogram(mu: float, sigma: float, M: int, rng: np.random.Generator) -> np.ndarray:
    """Integer counts of ``M`` draws from N(mu, sigma²) per unit score bin.

    Draws outside [0, 10) are clamped into the first/last bin.
    """
    samples = rng.normal(mu, sigma, size=M)
    idx = np.clip(np.floor(samples), 0, NUM_BINS - 1).astype(np.int64)
    return np.bincount(idx, minlength=NUM_BINS)


def mu_to_distribution(mu: float, config: LabelGenConfig, rng: np.random.Generator) -> ScoreDistribution:
    counts = sample_histogram(mu, config.sigma, config.M, rng)
    return ScoreDistribution(exact_unit_sum(counts / config.M))


def exact_unit_sum(probs: np.ndarray) -> np.ndarray:
    """Absorb float rounding into one bin so ``probs.sum() == 1.0`` holds exactly.

    Pairwise summation can skip over 1.0 when a single bin moves, so each
    non-zero bin is tried in turn (largest first), stepping one ulp at a time.
    """
    probs = np.array(probs, dtype=np.float64)
    if probs.sum() == 1.0:
        return probs
    for j in np.argsort(-probs, kind="stable"):
        if probs[j] == 0.0:
            break
        trial = probs.copy()
        trial[j] += 1.0 - trial.sum()
        for _ in range(64):
            total = trial.sum()
            if total == 1.0:
                return trial
            trial[j] = np.nextafter(trial[j], -np.inf if total > 1.0 else np.inf)
    return probs


def record_rng(seed: int, record_key: str) -> np.random.Generator:
    """Independent, reproducible stream per (seed, record)."""
    return np.random.default_rng([int(seed), zlib.crc32(record_key.encode("utf-8"))])


@dataclass(frozen=True)
class LabeledRecord:
    key: str
    psnr: float
    mu: float
    target: ScoreDistribution


def label_corpus(
    records: Sequence[tuple[str, float]] | Iterable[tuple[str, float]],
    config: LabelGenConfig,
) -> list[LabeledRecord]:
    """Attach μ and a target histogram to each ``(record_key, psnr)`` pair.

    ``config.min_psnr``/``max_psnr`` must be the extremes over ``records``;
    use :func:`config_for` to build one.
    """
    records = list(records)
    if not records:
        raise ValueError("empty record list")
    psnrs = [p for _, p in records]
    if min(psnrs) != config.min_psnr or max(psnrs) != config.max_psnr:
        raise ValueError("config PSNR extremes do not match the records")
    out = []
    for key, psnr in records:
        mu = psnr_to_mu(psnr, config)
        target = mu_to_distribution(mu, config, record_rng(config.seed, key))
        out.append(LabeledRecord(key, float(psnr), mu, target))
    return out


def config_for(psnrs: Iterable[float], sigma: float = 1.5, M: int = 100_000, seed: int = 0) -> LabelGenConfig:
    psnrs = [float(p) for p in psnrs]
    if not psnrs:
        raise ValueError("empty record list")
    return LabelGenConfig(min(psnrs), max(psnrs), sigma=sigma, M=M, seed=seed)

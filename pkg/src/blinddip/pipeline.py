"""End-to-end flows: auto-stopped denoising, evaluation and the warm-start study."""

from __future__ import annotations

import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PairManifest, PairRecord, ReportRow, write_report
from .dip import DipConfig, NetworkState, ReconstructionTrace, build_network, prune_snapshots, reconstruct
from .images import dequantize, load_image, quantize
from .labels import compute_psnr
from .quality import BiqanModel, mean_score, predict_distribution
from .stopping import StopController, StopDecision, StopPolicy

log = logging.getLogger(__name__)


@dataclass
class DenoiseResult:
    trace: ReconstructionTrace
    decision: StopDecision
    chosen_iteration: int
    denoised: np.ndarray
    state: NetworkState

    @property
    def declared(self) -> bool:
        return not self.decision.no_peak_declared


class AutoStop:
    """Engine observer: score each snapshot with the quality model and feed the stop rule.

    Scoring uses the 8-bit quantized snapshot, i.e. exactly what is stored on disk.
    """

    def __init__(self, model: BiqanModel, policy: StopPolicy):
        self.model = model
        self.controller = StopController(policy)

    def __call__(self, iteration: int, snapshot: np.ndarray) -> bool:
        score = mean_score(predict_distribution(dequantize(quantize(snapshot)), self.model))
        return self.controller.update(score)


def denoise(
    noisy: np.ndarray,
    model: BiqanModel,
    dip_config: DipConfig,
    policy: StopPolicy,
    out_dir: str | Path,
    warm_start: NetworkState | None = None,
    keep_all: bool = False,
    effective_config: dict | None = None,
) -> DenoiseResult:
    """Reconstruct with auto-stop; writes ``denoised.png`` and ``trace.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    snap_dir = out_dir / "snapshots"
    auto = AutoStop(model, policy)
    trace, state = reconstruct(noisy, dip_config, warm_start=warm_start, observer=auto, run_dir=snap_dir)
    decision = auto.controller.decision()
    for entry, raw, sm in zip(trace.entries, decision.raw, decision.smoothed):
        entry.raw_score = raw
        entry.smoothed_score = sm
    chosen = trace.entries[decision.final_index]
    trace.final_choice = chosen.iteration
    trace.extra["stop_decision"] = {
        "final_index": decision.final_index,
        "coarse_index": decision.coarse_index,
        "declared_at": decision.declared_at,
        "declared_iteration": None if decision.declared_at is None else trace.entries[decision.declared_at].iteration,
        "no_peak_declared": decision.no_peak_declared,
        "policy": asdict(policy),
    }
    if effective_config is not None:
        trace.extra["effective_config"] = effective_config

    shutil.copyfile(snap_dir / chosen.snapshot_ref, out_dir / "denoised.png")
    denoised = load_image(out_dir / "denoised.png")
    if not keep_all:
        prune_snapshots(snap_dir, [chosen.snapshot_ref])
    (out_dir / "trace.json").write_text(trace.dumps())
    return DenoiseResult(trace, decision, chosen.iteration, denoised, state)


def write_score_curve(trace: ReconstructionTrace, path: str | Path) -> Path:
    path = Path(path)
    lines = ["iteration,raw_score,smoothed_score"]
    lines += [f"{e.iteration},{e.raw_score!r},{e.smoothed_score!r}" for e in trace.entries]
    path.write_text("\n".join(lines) + "\n")
    return path


def _evaluate_pair(args):
    rec, model_path, dip_dict, policy_dict, out_dir, keep_all = args
    from .quality import BiqanModel as _M

    model = _M.load(model_path)
    noisy = load_image(rec.noisy_path)
    clean = load_image(rec.clean_path)
    res = denoise(noisy, model, DipConfig.from_dict(dip_dict), StopPolicy(**policy_dict), out_dir, keep_all=keep_all)
    return {
        "id": rec.id,
        "camera": rec.camera_tag,
        "noisy_psnr": compute_psnr(noisy, clean),
        "denoised_psnr": compute_psnr(res.denoised, clean),
        "chosen_iteration": res.chosen_iteration,
        "declared": res.declared,
    }


def evaluate(
    pairs: PairManifest,
    model_path: str | Path,
    dip_config: DipConfig,
    policy: StopPolicy,
    out_dir: str | Path,
    jobs: int = 1,
    keep_all: bool = False,
) -> list[dict]:
    """Auto-stop denoise every pair and write ``report.csv`` (per-camera groups + average)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    todo = []
    for rec in pairs:
        if not rec.clean_path:
            raise ValueError(f"pair {rec.id!r} has no clean image")
        todo.append((rec, str(model_path), dip_config.to_dict(), asdict(policy), str(out_dir / "runs" / rec.id), keep_all))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_pair, todo))
    else:
        results = [_evaluate_pair(t) for t in todo]
    rows = [
        ReportRow(r["id"], r["camera"], {"noisy": r["noisy_psnr"], "proposed": r["denoised_psnr"]})
        for r in results
    ]
    write_report(rows, out_dir / "report.csv", methods=["noisy", "proposed"])
    (out_dir / "results.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    return results


# -- warm-start study -------------------------------------------------------

@dataclass
class StudyRow:
    id: str
    cold_best_psnr: float
    cold_best_iter: int
    cold_reach_iter: int
    warm_best_psnr: float
    warm_best_iter: int
    warm_reach_iter: int | None
    tolerance_db: float

    @property
    def warm_faster(self) -> bool:
        """Warm run gets within tolerance of the cold best before the cold run reaches its best."""
        return self.warm_reach_iter is not None and self.warm_reach_iter < self.cold_best_iter


@dataclass
class StudyResult:
    typical_id: str
    typical_iterations: int
    rows: list[StudyRow] = field(default_factory=list)

    @property
    def reduction_ratio(self) -> float:
        """1 − (total warm iterations to best PSNR) / (total cold iterations to best PSNR)."""
        cold = sum(r.cold_best_iter for r in self.rows)
        warm = sum(r.warm_best_iter for r in self.rows)
        return 1.0 - warm / cold if cold else 0.0

    @property
    def reach_reduction_ratio(self) -> float:
        """Same, counting warm iterations to come within tolerance of the cold best."""
        cold = sum(r.cold_best_iter for r in self.rows)
        warm = sum(r.warm_reach_iter if r.warm_reach_iter is not None else r.cold_best_iter for r in self.rows)
        return 1.0 - warm / cold if cold else 0.0

    def to_dict(self) -> dict:
        return {
            "typical_id": self.typical_id,
            "typical_iterations": self.typical_iterations,
            "reduction_ratio": self.reduction_ratio,
            "reach_reduction_ratio": self.reach_reduction_ratio,
            "warm_faster_count": sum(r.warm_faster for r in self.rows),
            "rows": [dict(asdict(r), warm_faster=r.warm_faster) for r in self.rows],
        }


def psnr_curve(noisy, clean, config, warm_start=None, reset_input=False) -> tuple[list[int], list[float]]:
    iters, psnrs = [], []

    def observe(it, snap):
        iters.append(it)
        psnrs.append(compute_psnr(snap, clean))

    reconstruct(noisy, config, warm_start=warm_start, observer=observe, reset_input=reset_input)
    return iters, psnrs


def train_typical(rec: PairRecord, config: DipConfig, iterations: int) -> NetworkState:
    noisy = load_image(rec.noisy_path)
    if iterations == 0:
        return build_network(config, config.seed, noisy.shape[:2])
    _, state = reconstruct(noisy, config.replace(max_iterations=iterations, eval_every=min(config.eval_every, iterations)))
    return state


def warmstart_study(
    pairs: PairManifest,
    typical_id: str,
    dip_config: DipConfig,
    typical_iterations: int = 600,
    warm_input: str = "reuse",
    tolerance_db: float = 0.5,
) -> StudyResult:
    """Cold vs warm reconstructions of every non-typical pair with identical seeds."""
    if warm_input not in ("fresh", "reuse"):
        raise ValueError("warm_input must be 'fresh' or 'reuse'")
    typical = pairs.get(typical_id)
    others = [r for r in pairs if r.id != typical_id]
    if not others:
        raise ValueError("warm-start study needs at least one pair besides the typical image")
    state = train_typical(typical, dip_config, typical_iterations)
    result = StudyResult(typical_id, typical_iterations)
    for rec in others:
        if not rec.clean_path:
            raise ValueError(f"pair {rec.id!r} has no clean image")
        noisy, clean = load_image(rec.noisy_path), load_image(rec.clean_path)
        ci, cp = psnr_curve(noisy, clean, dip_config)
        wi, wp = psnr_curve(noisy, clean, dip_config, warm_start=state, reset_input=warm_input == "fresh")
        row = study_row(rec.id, ci, cp, wi, wp, tolerance_db)
        log.info("%s: %s", rec.id, row)
        result.rows.append(row)
    return result


def study_row(pair_id: str, ci: Sequence[int], cp: Sequence[float], wi: Sequence[int], wp: Sequence[float], tol: float) -> StudyRow:
    cb = int(np.argmax(cp))
    wb = int(np.argmax(wp))
    target = cp[cb] - tol
    cold_reach = next(ci[k] for k, p in enumerate(cp) if p >= target)
    warm_reach = next((wi[k] for k, p in enumerate(wp) if p >= target), None)
    return StudyRow(pair_id, float(cp[cb]), ci[cb], cold_reach, float(wp[wb]), wi[wb], warm_reach, tol)

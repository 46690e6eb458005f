"""Pair manifests, co-registered cropping, corpus building and Table-style reports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dip import DipConfig, ReconstructionError, reconstruct
from .images import dequantize, load_image, quantize, save_png
from .labels import LabelGenConfig, compute_psnr, config_for, label_corpus

log = logging.getLogger(__name__)

CORPUS_FORMAT_VERSION = 1


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PairRecord:
    id: str
    noisy_path: str
    clean_path: str | None = None
    camera_tag: str | None = None


@dataclass
class PairManifest:
    records: list[PairRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate id {r.id!r}")
            seen.add(r.id)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def get(self, pair_id: str) -> PairRecord:
        for r in self.records:
            if r.id == pair_id:
                return r
        raise KeyError(pair_id)


def load_manifest(path: str | Path, check_files: bool = True) -> PairManifest:
    """Read a JSONL pair manifest. Relative paths resolve against the manifest's folder."""
    path = Path(path)
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = PairRecord(
                id=str(d["id"]),
                noisy_path=str(base / d["noisy"]),
                clean_path=str(base / d["clean"]) if d.get("clean") else None,
                camera_tag=d.get("camera"),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
        if check_files and not Path(rec.noisy_path).exists():
            raise ManifestError(f"{path}:{lineno}: noisy image {rec.noisy_path} not found")
        records.append(rec)
    try:
        return PairManifest(records)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def write_manifest(manifest: PairManifest, path: str | Path) -> Path:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        if p is None:
            return None
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    lines = []
    for r in manifest:
        d = {"id": r.id, "noisy": rel(r.noisy_path)}
        if r.clean_path is not None:
            d["clean"] = rel(r.clean_path)
        if r.camera_tag is not None:
            d["camera"] = r.camera_tag
        lines.append(json.dumps(d, sort_keys=True))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def crop_offsets(shape: tuple[int, int], size: int, count: int, seed: int) -> list[tuple[int, int]]:
    """``count`` distinct top-left offsets for ``size``×``size`` crops."""
    h, w = shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    ny, nx = h - size + 1, w - size + 1
    if count > ny * nx:
        raise ValueError(f"cannot take {count} distinct {size}px crops from {h}x{w}")
    rng = np.random.default_rng(seed)
    flat = rng.choice(ny * nx, size=count, replace=False)
    return [(int(i // nx), int(i % nx)) for i in flat]


def crop_regions(image: np.ndarray, size: int = 512, count: int = 1, seed: int = 0) -> list[np.ndarray]:
    offsets = crop_offsets(image.shape[:2], size, count, seed)
    return [image[y : y + size, x : x + size].copy() for y, x in offsets]


def crop_pair(noisy: np.ndarray, clean: np.ndarray, size: int, count: int, seed: int):
    """Same offsets for both members; returns (noisy_crops, clean_crops, offsets)."""
    if noisy.shape != clean.shape:
        raise ValueError(f"pair shape mismatch: {noisy.shape} vs {clean.shape}")
    offsets = crop_offsets(noisy.shape[:2], size, count, seed)
    cut = lambda im: [im[y : y + size, x : x + size].copy() for y, x in offsets]  # noqa: E731
    return cut(noisy), cut(clean), offsets


def prepare_crops(
    manifest: PairManifest, out_dir: str | Path, size: int = 512, count: int = 1, seed: int = 0
) -> PairManifest:
    """Crop every pair into ``count`` co-registered regions and write a new manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for k, rec in enumerate(manifest):
        noisy = load_image(rec.noisy_path)
        clean = load_image(rec.clean_path) if rec.clean_path else None
        offsets = crop_offsets(noisy.shape[:2], size, count, seed + k)
        for j, (y, x) in enumerate(offsets):
            cid = f"{rec.id}_r{j:02d}"
            npath = save_png(noisy[y : y + size, x : x + size], out_dir / f"{cid}_noisy.png")
            cpath = None
            if clean is not None:
                cpath = str(save_png(clean[y : y + size, x : x + size], out_dir / f"{cid}_clean.png"))
            records.append(PairRecord(cid, str(npath), cpath, rec.camera_tag))
    result = PairManifest(records)
    write_manifest(result, out_dir / "pairs.jsonl")
    return result


@dataclass
class CorpusRecord:
    source_id: str
    iteration: int
    snapshot_path: str
    psnr: float
    psnr_quantized: float
    mu: float | None = None
    target: list[float] | None = None

    @property
    def key(self) -> str:
        return f"{self.source_id}:{self.iteration:06d}"


@dataclass
class Corpus:
    root: Path
    label_config: LabelGenConfig
    records: list[CorpusRecord]
    corpus_id: str
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def manifest_path(self) -> Path:
        return self.root / "corpus.jsonl"

    def snapshot_file(self, rec: CorpusRecord) -> Path:
        return self.root / rec.snapshot_path

    def training_examples(self):
        from .quality import TrainingExample

        return [
            TrainingExample(r.source_id, str(self.snapshot_file(r)), np.asarray(r.target), r.psnr)
            for r in self.records
        ]


def _run_pair(rec: PairRecord, dip_config: DipConfig, run_dir: Path) -> list[dict]:
    noisy = load_image(rec.noisy_path)
    clean = load_image(rec.clean_path)
    rows = []

    def observe(it, snap):
        rows.append(
            {
                "source_id": rec.id,
                "iteration": it,
                "snapshot_path": f"runs/{rec.id}/snap_{it:06d}.png",
                "psnr": compute_psnr(snap, clean),
                "psnr_quantized": compute_psnr(dequantize(quantize(snap)), clean),
            }
        )
        return False

    trace, _ = reconstruct(noisy, dip_config, observer=observe, run_dir=run_dir)
    (run_dir / "trace.json").write_text(trace.dumps())
    return rows


def _pair_job(args) -> tuple[str, list[dict] | None, str | None]:
    rec, config_dict, run_dir = args
    try:
        rows = _run_pair(rec, DipConfig.from_dict(config_dict), Path(run_dir))
    except ReconstructionError as exc:
        return rec.id, None, str(exc)
    return rec.id, rows, None


def build_corpus(
    pairs: PairManifest,
    dip_config: DipConfig,
    out_dir: str | Path,
    sigma: float = 1.5,
    M: int = 100_000,
    label_seed: int = 0,
    jobs: int = 1,
) -> Corpus:
    """Reconstruct every pair, score snapshots by PSNR against the clean image, label.

    Completed pairs (``runs/<id>/records.jsonl`` present) are not recomputed.
    Pairs whose reconstruction aborts are listed in ``Corpus.failures``.
    """
    out_dir = Path(out_dir)
    for rec in pairs:
        if not rec.clean_path:
            raise ManifestError(f"pair {rec.id!r} has no clean image")
    todo = []
    for rec in pairs:
        run_dir = out_dir / "runs" / rec.id
        if not (run_dir / "records.jsonl").exists():
            run_dir.mkdir(parents=True, exist_ok=True)
            todo.append((rec, dip_config.to_dict(), str(run_dir)))

    failures: dict[str, str] = {}
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_pair_job, todo))
    else:
        results = [_pair_job(t) for t in todo]
    # single writer for the per-pair record files
    for pair_id, rows, err in results:
        if err is not None:
            log.error("pair %s skipped: %s", pair_id, err)
            failures[pair_id] = err
            continue
        path = out_dir / "runs" / pair_id / "records.jsonl"
        path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))

    records: list[CorpusRecord] = []
    for rec in pairs:
        path = out_dir / "runs" / rec.id / "records.jsonl"
        if rec.id in failures or not path.exists():
            continue
        records += [CorpusRecord(**json.loads(line)) for line in path.read_text().splitlines() if line]
    if not records:
        raise ValueError("no corpus records were produced")

    config = config_for([r.psnr for r in records], sigma=sigma, M=M, seed=label_seed)
    return _finish_corpus(out_dir, records, config, failures)


def _finish_corpus(out_dir: Path, records: list[CorpusRecord], config: LabelGenConfig, failures) -> Corpus:
    labeled = label_corpus([(r.key, r.psnr) for r in records], config)
    for r, lab in zip(records, labeled):
        r.mu = lab.mu
        r.target = lab.target.tolist()
    corpus_id = hashlib.sha256(
        json.dumps([[r.key, r.psnr] for r in records], sort_keys=True).encode()
    ).hexdigest()[:12]
    deltas = [abs(r.psnr - r.psnr_quantized) for r in records]
    header = {
        "type": "header",
        "format_version": CORPUS_FORMAT_VERSION,
        "corpus_id": corpus_id,
        "label_config": config.to_dict(),
        "num_records": len(records),
        "max_quantization_delta_db": max(deltas),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps({"type": "record", **asdict(r)}, sort_keys=True) for r in records]
    (out_dir / "corpus.jsonl").write_text("".join(line + "\n" for line in lines))
    log.info("corpus %s: %d records, max quantization delta %.4f dB", corpus_id, len(records), max(deltas))
    return Corpus(out_dir, config, records, corpus_id, failures)


def subsample_corpus(corpus: Corpus, keep: Iterable[str], out_dir: str | Path | None = None) -> Corpus:
    """Restrict a corpus to the records whose keys are in ``keep`` and relabel.

    PSNR extremes are recomputed over the kept set.
    """
    keep = set(keep)
    records = [CorpusRecord(**{k: v for k, v in asdict(r).items()}) for r in corpus.records if r.key in keep]
    cfg = corpus.label_config
    config = config_for([r.psnr for r in records], sigma=cfg.sigma, M=cfg.M, seed=cfg.seed)
    out_dir = Path(out_dir) if out_dir else corpus.root
    if out_dir != corpus.root:
        out_dir.mkdir(parents=True, exist_ok=True)
        for r in records:
            r.snapshot_path = str(corpus.snapshot_file(r).resolve())
    return _finish_corpus(out_dir, records, config, {})


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    if path.is_dir():
        path = path / "corpus.jsonl"
    lines = path.read_text().splitlines()
    header = None
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            kind = d.pop("type")
            if kind == "header":
                header = d
            elif kind == "record":
                records.append(CorpusRecord(**d))
            else:
                raise ValueError(f"unknown line type {kind!r}")
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    if header is None:
        raise ManifestError(f"{path}: missing header line")
    if header.get("format_version") != CORPUS_FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported corpus format {header.get('format_version')!r}")
    return Corpus(path.parent, LabelGenConfig.from_dict(header["label_config"]), records, header["corpus_id"])


@dataclass
class ReportRow:
    image_id: str
    camera_tag: str | None
    values: dict[str, float]


def write_report(rows: Sequence[ReportRow], path: str | Path, methods: Sequence[str] | None = None) -> Path:
    """Per-image PSNR table grouped by camera, closed by an ``Average`` row.

    With no rows the file holds the header and an ``Average`` row marked ``NA``.
    """
    path = Path(path)
    if methods is None:
        methods = []
        for r in rows:
            for m in r.values:
                if m not in methods:
                    methods.append(m)
    groups: dict[str, list[ReportRow]] = {}
    for r in rows:
        groups.setdefault(r.camera_tag or "", []).append(r)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["camera", "image_id", *methods])
        for tag, members in groups.items():
            for r in members:
                w.writerow([tag, r.image_id, *(_fmt(r.values.get(m)) for m in methods)])
        if rows:
            avgs = []
            for m in methods:
                vals = [r.values[m] for r in rows if r.values.get(m) is not None]
                avgs.append(_fmt(float(np.mean(vals))) if vals else "NA")
            w.writerow(["Average", "", *avgs])
        else:
            w.writerow(["Average", "", *(["NA"] * max(1, len(methods)))])
    return path


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.2f}"


def read_report(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))

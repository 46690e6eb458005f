"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 success via the
backstop fallback (no quality peak was declared before max iterations).

Settings resolve as: command-line flag > ``--config`` file > built-in default.
The config file is plain ``key = value`` lines (``#`` comments); keys are
the DipConfig and StopPolicy field names plus ``width``. Per-scale values
may be written as a single number or a comma-separated list.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .data import ManifestError, build_corpus, load_corpus, load_manifest, prepare_crops
from .dip import ConfigError, DipConfig, FingerprintMismatch, ReconstructionError, StateFileError, load_state
from .images import ImageError, load_image
from .quality import BackboneMismatchError, BiqanModel, ModelFormatError, TrainSchedule, train_biqan
from .stopping import StopPolicy

log = logging.getLogger("blinddip")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_BACKSTOP = 0, 1, 2, 3

_DIP_KEYS = {f.name for f in fields(DipConfig)}
_POLICY_KEYS = {f.name for f in fields(StopPolicy)}
_PER_SCALE = {"filters_down", "filters_up", "filters_skip", "kernel_down", "kernel_up", "kernel_skip"}


class UsageError(Exception):
    pass


def read_config_file(path: str | Path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = "[blinddip]\n" + text
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            out[key] = _parse_value(key, raw)
    unknown = sorted(set(out) - _DIP_KEYS - _POLICY_KEYS - {"width"})
    if unknown:
        raise UsageError(f"{path}: unknown setting(s): {', '.join(unknown)}")
    return out


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in _PER_SCALE and "," in raw:
        return tuple(int(v) for v in raw.strip("[]()").split(",") if v.strip())
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve(args, defaults: dict) -> dict:
    """Merge built-in defaults, the config file and explicit flags, in rising priority."""
    eff = dict(defaults)
    if getattr(args, "config", None):
        eff.update(read_config_file(args.config))
    flag_map = {"seed": "seed", "max_iters": "max_iterations", "eval_every": "eval_every", "width": "width"}
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            eff[key] = value
    return eff


def dip_config_from(eff: dict) -> DipConfig:
    return DipConfig(**{k: v for k, v in eff.items() if k in _DIP_KEYS})


def policy_from(eff: dict) -> StopPolicy:
    return StopPolicy(**{k: v for k, v in eff.items() if k in _POLICY_KEYS})


def _defaults() -> dict:
    d = DipConfig().to_dict()
    # uniform per-scale defaults stay scalar so a different depth still broadcasts
    for key in _PER_SCALE:
        if len(set(d[key])) == 1:
            d[key] = d[key][0]
    d.update(asdict(StopPolicy()))
    d["width"] = 1.0
    return d


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="output directory (or file, for train)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blinddip", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("denoise", help="denoise one image with auto-stop")
    p.add_argument("noisy")
    p.add_argument("--model", required=True)
    p.add_argument("--warm-start", help="saved network state to start from")
    p.add_argument("--keep-all", action="store_true", help="keep every snapshot")
    p.add_argument("--score-curve", action="store_true", help="also write score_curve.csv")
    p.add_argument("--save-state", help="write the final network state here")
    _common(p)

    p = sub.add_parser("make-corpus", help="build the quality-network training corpus")
    p.add_argument("manifest")
    p.add_argument("--crop-size", type=int, help="crop pairs to this size first")
    p.add_argument("--crops-per-image", type=int, default=1)
    p.add_argument("--sigma", type=float, default=1.5)
    p.add_argument("--samples", type=int, default=100_000, help="Gaussian draws per label")
    _common(p)

    p = sub.add_parser("train", help="train the quality network on a corpus")
    p.add_argument("corpus")
    p.add_argument("--backbone", required=True, help="pretrained backbone weights")
    p.add_argument("--width", type=float)
    p.add_argument("--stage1-epochs", type=int, default=10)
    p.add_argument("--stage2-epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=32)
    _common(p)

    p = sub.add_parser("evaluate", help="auto-stop denoise a manifest and write the PSNR table")
    p.add_argument("manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--keep-all", action="store_true")
    _common(p)

    p = sub.add_parser("warmstart-study", help="cold vs warm-start iteration comparison")
    p.add_argument("manifest")
    p.add_argument("--typical", required=True, help="id of the typical pair")
    p.add_argument("--typical-iters", type=int, default=600)
    p.add_argument("--warm-input", choices=["reuse", "fresh"], default="reuse",
                   help="reuse the typical run's base input (default) or draw a fresh one")
    p.add_argument("--tolerance-db", type=float, default=0.5)
    _common(p)

    p = sub.add_parser("standin-backbone", help="write proxy-pretrained backbone weights")
    p.add_argument("--width", type=float, default=0.25)
    p.add_argument("--images", type=int, default=3000)
    p.add_argument("--epochs", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return ap


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def cmd_denoise(args) -> int:
    from .pipeline import denoise, write_score_curve

    eff = resolve(args, _defaults())
    config, policy = dip_config_from(eff), policy_from(eff)
    model = BiqanModel.load(args.model)
    warm = load_state(args.warm_start, config) if args.warm_start else None
    noisy = load_image(args.noisy)
    out = _out(args, "denoise_out")
    out.mkdir(parents=True, exist_ok=True)
    res = denoise(
        noisy, model, config, policy, out, warm_start=warm, keep_all=args.keep_all,
        effective_config={"dip": config.to_dict(), "stop": asdict(policy), "warm_start": bool(warm)},
    )
    if args.score_curve:
        write_score_curve(res.trace, out / "score_curve.csv")
    if args.save_state:
        from .dip import save_state

        save_state(res.state, args.save_state)
    log.info("chose iteration %d (%s)", res.chosen_iteration, "declared" if res.declared else "backstop")
    return EXIT_OK if res.declared else EXIT_BACKSTOP


def cmd_make_corpus(args) -> int:
    eff = resolve(args, _defaults())
    config = dip_config_from(eff)
    out = _out(args, "corpus")
    out.mkdir(parents=True, exist_ok=True)
    pairs = load_manifest(args.manifest)
    if args.crop_size:
        pairs = prepare_crops(pairs, out / "crops", args.crop_size, args.crops_per_image, config.seed)
    corpus = build_corpus(pairs, config, out, sigma=args.sigma, M=args.samples, label_seed=config.seed, jobs=args.jobs)
    (out / "effective_config.json").write_text(json.dumps({"dip": config.to_dict()}, indent=1, sort_keys=True))
    print(f"{len(corpus.records)} records -> {corpus.manifest_path}")
    if corpus.failures:
        for pid, err in corpus.failures.items():
            print(f"failed: {pid}: {err}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_train(args) -> int:
    eff = resolve(args, _defaults())
    corpus = load_corpus(args.corpus)
    schedule = TrainSchedule(
        stage1_epochs=args.stage1_epochs, stage2_epochs=args.stage2_epochs, batch_size=args.batch_size
    )
    cfg = corpus.label_config
    model = train_biqan(
        corpus.training_examples(), schedule, args.backbone, seed=int(eff["seed"]), width=float(eff["width"]),
        metadata={"corpus_id": corpus.corpus_id, "min_psnr": cfg.min_psnr, "max_psnr": cfg.max_psnr,
                  "label_config": cfg.to_dict()},
    )
    out = _out(args, "biqan.pt")
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    print(f"model -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .pipeline import evaluate

    eff = resolve(args, _defaults())
    config, policy = dip_config_from(eff), policy_from(eff)
    BiqanModel.load(args.model)  # fail fast on a bad model file
    out = _out(args, "evaluation")
    results = evaluate(load_manifest(args.manifest), args.model, config, policy, out, jobs=args.jobs, keep_all=args.keep_all)
    print(f"{len(results)} images -> {out / 'report.csv'}")
    return EXIT_OK


def cmd_warmstart_study(args) -> int:
    from .pipeline import warmstart_study

    eff = resolve(args, _defaults())
    config = dip_config_from(eff)
    pairs = load_manifest(args.manifest)
    try:
        pairs.get(args.typical)
    except KeyError:
        raise UsageError(f"typical id {args.typical!r} not in manifest") from None
    result = warmstart_study(pairs, args.typical, config, args.typical_iters, args.warm_input, args.tolerance_db)
    out = _out(args, "warmstart_study")
    out.mkdir(parents=True, exist_ok=True)
    summary = result.to_dict()
    summary["effective_config"] = {"dip": config.to_dict(), "warm_input": args.warm_input}
    (out / "study.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    lines = ["id,cold_best_psnr,cold_best_iter,warm_best_psnr,warm_best_iter,warm_reach_iter,psnr_delta"]
    for r in result.rows:
        lines.append(
            f"{r.id},{r.cold_best_psnr:.3f},{r.cold_best_iter},{r.warm_best_psnr:.3f},{r.warm_best_iter},"
            f"{'' if r.warm_reach_iter is None else r.warm_reach_iter},{r.warm_best_psnr - r.cold_best_psnr:.3f}"
        )
    (out / "study.csv").write_text("\n".join(lines) + "\n")
    print(f"iteration reduction {result.reduction_ratio:.1%} (reference: 36%) -> {out / 'study.json'}")
    return EXIT_OK


def cmd_standin_backbone(args) -> int:
    from .standin import write_standin_backbone

    path = write_standin_backbone(args.out, args.width, args.seed, num_images=args.images, epochs=args.epochs)
    print(f"backbone -> {path}")
    return EXIT_OK


COMMANDS = {
    "denoise": cmd_denoise,
    "make-corpus": cmd_make_corpus,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "warmstart-study": cmd_warmstart_study,
    "standin-backbone": cmd_standin_backbone,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, TypeError) as exc:
        print(f"blinddip: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        FileNotFoundError, ManifestError, ModelFormatError, BackboneMismatchError, StateFileError,
        FingerprintMismatch, ReconstructionError, ImageError, ValueError,
    ) as exc:
        print(f"blinddip: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

"""Full-scale protocol: PolyU-trained scorer, Nam evaluation table, warm-start study.

Needs the external datasets and ImageNet-pretrained MobileNet weights:

    python full_protocol/run_protocol.py \
        --polyu polyu_pairs.jsonl --nam nam_pairs.jsonl \
        --backbone mobilenet_imagenet.pt --typical nam_12 --out protocol_out

Manifests are JSONL lines ``{"id", "noisy", "clean", "camera"}``. The Nam
manifest should list the 15 evaluation images; the PolyU manifest the 100
training images. Every image is cropped to one 512x512 region. Expect about
25 GPU-minutes per image at 5000 iterations; on CPU this takes days.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from blinddip.cli import main as cli
from blinddip.data import load_manifest, prepare_crops

ITERATIONS = 5000
CROP = 512


def run(argv: list[str]) -> None:
    print("+ blinddip", " ".join(argv), flush=True)
    code = cli(argv)
    if code not in (0, 3):
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--polyu", required=True)
    ap.add_argument("--nam", required=True)
    ap.add_argument("--backbone", required=True, help="ImageNet-pretrained width-1.0 backbone")
    ap.add_argument("--typical", required=True, help="Nam id of image #12")
    ap.add_argument("--config", help="optional key = value overrides")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="protocol_out")
    args = ap.parse_args()

    out = Path(args.out)
    common = ["--seed", str(args.seed), "--max-iters", str(ITERATIONS), "--jobs", str(args.jobs)]
    if args.config:
        common += ["--config", args.config]

    # scorer training corpus: 100 PolyU regions
    run(["make-corpus", args.polyu, "--crop-size", str(CROP), "--crops-per-image", "1",
         "--out", str(out / "corpus")] + common)
    model = out / "biqan.pt"
    run(["train", str(out / "corpus" / "corpus.jsonl"), "--backbone", args.backbone, "--width", "1.0",
         "--seed", str(args.seed), "--out", str(model)])

    # evaluation table over 15 Nam regions
    nam = prepare_crops(load_manifest(args.nam), out / "nam_crops", CROP, 1, args.seed)
    crops = out / "nam_crops" / "pairs.jsonl"
    run(["evaluate", str(crops), "--model", str(model), "--out", str(out / "evaluation")] + common)

    # warm start from the typical image
    typical = f"{args.typical}_r00"
    nam.get(typical)
    run(["warmstart-study", str(crops), "--typical", typical, "--typical-iters", str(ITERATIONS),
         "--warm-input", "reuse", "--out", str(out / "warmstart")] + common)
    print(f"table -> {out / 'evaluation' / 'report.csv'} (reference average 37.56 dB)")


if __name__ == "__main__":
    main()

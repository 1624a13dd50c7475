"""End-to-end run on the synthetic toy workspace.

Generates the data, trains the upsampler, aligns the SAR student, segments
the evaluation scenes (optical and SAR) and scores them.

    python scripts/run_toy_pipeline.py --workdir /tmp/toy
"""
import argparse
import sys
from pathlib import Path

from ovseg.cli import main as ovseg


def run(*argv: str) -> None:
    code = ovseg(list(argv))
    if code:
        sys.exit(code)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="toy_run")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true", help="5 training steps instead of the configured count")
    args = ap.parse_args()

    root = Path(args.workdir)
    common = ["--workdir", str(root), "--seed", str(args.seed)]
    run("gen-toy-data", *common)
    common += ["--config", "toy.cfg"]
    if args.quick:
        common += ["--set", "train.steps=5", "--set", "distill.steps=5"]

    run("train-upsampler", *common)
    run("distill", *common)
    for img in sorted((root / "eval" / "images").glob("*.ppm")):
        run("segment", *common, f"eval/images/{img.name}", "eval/vocab.txt",
            "--out", f"pred/{img.stem}.pgm", "--color", f"color/{img.stem}.ppm")
    run("eval", *common, "pred", "eval/masks")
    run("segment", *common, "--sar", "pairs/sar_00.pgm", "eval/vocab.txt", "--out", "sar_00_mask.pgm")


if __name__ == "__main__":
    main()

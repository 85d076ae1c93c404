"""Evaluation job: MAE/MSE of a checkpoint and the three baselines.

Writes a report CSV with columns ``mode,method,mae,mse,n_images`` (one row
each for the trained model and the random, mean and prior-draw baselines).
``--dump-density DIR`` also writes the predicted full-image density of every
test image as DMAP files.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd

from selfcount.config import RunConfig, add_run_config_arguments, load_run_config
from selfcount.data.loader import UnlabeledImageSource, read_manifest, write_dmap
from selfcount.domain.prior import CalibrationError
from selfcount.models.checkpoint import CheckpointFormatError, load_checkpoint
from selfcount.models.net import OUTPUT_STRIDE
from selfcount.models.pipeline import evaluate, predict_density


def dump_densities(cfg: RunConfig, checkpoint: str, test_manifest: str, out_dir: str) -> int:
    net = load_checkpoint(checkpoint).to_network()
    paths = read_manifest(test_manifest)["image"].tolist()
    source = UnlabeledImageSource(paths)
    out = Path(out_dir)
    for index, image_path in enumerate(paths):
        img = source.image(index)
        crop = min(cfg.stage2_crop, img.height, img.width) // OUTPUT_STRIDE * OUTPUT_STRIDE
        write_dmap(predict_density(net, img, crop), out / f"{Path(image_path).stem}.dmap")
    return len(paths)


def run(
    cfg: RunConfig,
    checkpoint: str,
    out: str,
    stage1: Optional[str] = None,
    dump_density: Optional[str] = None,
) -> pd.DataFrame:
    print("Starting evaluation...")
    print(f"Checkpoint: {checkpoint}")
    print(f"Test manifest: {cfg.test_manifest}")

    ckpt = load_checkpoint(checkpoint)
    stage1_ckpt = load_checkpoint(stage1) if stage1 else None
    report = evaluate(cfg, ckpt, cfg.test_manifest, stage1_ckpt)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_path, index=False)

    dumped = 0
    if dump_density:
        dumped = dump_densities(cfg, checkpoint, cfg.test_manifest, dump_density)

    print("=" * 60)
    print("Evaluation complete.")
    for row in report.itertuples():
        print(f"  {row.method:<8} MAE={row.mae:10.3f}  MSE={row.mse:10.3f}")
    print(f"  Images:  {int(report['n_images'].iloc[0]):,}")
    print(f"  Report:  {out_path}")
    if dump_density:
        print(f"  Density maps: {dumped:,} in {dump_density}")
    return report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Evaluate a checkpoint against baselines")
    parser.add_argument("--checkpoint", required=True, help="Trained CSSN checkpoint")
    parser.add_argument(
        "--stage1", default=None, help="Stage 1 checkpoint backing the random baseline"
    )
    parser.add_argument("--out", default=None, help="Report CSV (default <output_dir>/report.csv)")
    parser.add_argument("--dump-density", default=None, help="Directory for DMAP predictions")
    add_run_config_arguments(parser)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> None:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, vars(args))
        out = args.out or str(Path(cfg.output_dir) / "report.csv")
        run(cfg, args.checkpoint, out, stage1=args.stage1, dump_density=args.dump_density)
    except (CheckpointFormatError, CalibrationError, ValueError, OSError) as e:
        print(f"Evaluation failed: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()

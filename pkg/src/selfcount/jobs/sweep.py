"""Sensitivity sweep job over ``c_fmax`` or ``alpha``.

Retrains Stage 2 once per value from the same Stage 1 checkpoint and writes
``parameter,value,mae,mse`` rows for the trained model on the test manifest.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import pandas as pd

from selfcount.config import RunConfig, add_run_config_arguments, load_run_config
from selfcount.domain.prior import CalibrationError
from selfcount.jobs.train import load_stage1
from selfcount.models.checkpoint import CheckpointFormatError
from selfcount.models.pipeline import SWEEP_PARAMETERS, MissingCheckpointError, sweep


def parse_values(text: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ValueError(f"values must be comma-separated numbers, got {text!r}") from e
    if not values:
        raise ValueError("at least one sweep value is required")
    return values


def run(
    cfg: RunConfig,
    parameter: str,
    values: Sequence[float],
    out: str,
    stage1: Optional[str] = None,
) -> pd.DataFrame:
    print("Starting sensitivity sweep...")
    print(f"Parameter: {parameter}, values: {', '.join(f'{v:g}' for v in values)}")

    stage1_ckpt = load_stage1(cfg, stage1)
    table = sweep(cfg, parameter, values, stage1_ckpt, cfg.test_manifest)
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_path, index=False)

    print("=" * 60)
    print("Sweep complete.")
    for row in table.itertuples():
        print(f"  {parameter}={row.value:<10g} MAE={row.mae:10.3f}  MSE={row.mse:10.3f}")
    if len(table) > 1:
        spread = table["mae"].max() - table["mae"].min()
        print(f"  MAE spread: {spread:.3f} ({100 * spread / table['mae'].mean():.1f}% of mean)")
    print(f"  Report: {out_path}")
    return table


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Retrain Stage 2 across prior settings")
    parser.add_argument("--parameter", required=True, choices=SWEEP_PARAMETERS)
    parser.add_argument("--values", required=True, help="Comma-separated values, e.g. 600,720,840")
    parser.add_argument("--stage1", default=None, help="Stage 1 checkpoint")
    parser.add_argument("--out", default=None, help="Sweep CSV (default <output_dir>/sweep.csv)")
    add_run_config_arguments(parser)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> None:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, vars(args))
        out = args.out or str(Path(cfg.output_dir) / f"sweep_{args.parameter}.csv")
        run(cfg, args.parameter, parse_values(args.values), out, stage1=args.stage1)
    except (
        MissingCheckpointError,
        CheckpointFormatError,
        CalibrationError,
        ValueError,
        OSError,
    ) as e:
        print(f"Sweep failed: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()

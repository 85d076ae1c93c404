"""Training job: ``stage1``, ``stage2``, ``semi`` and ``supervised``.

Every command reads a run configuration (defaults, then ``--config``, then
per-key flags), trains, and writes a CSSN checkpoint plus the resolved
configuration next to it (``<checkpoint>.cfg``). Stage 2 and later commands
start from ``--stage1`` (default ``<output_dir>/stage1.cssn``).
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from selfcount.config import RunConfig, add_run_config_arguments, load_run_config
from selfcount.data.loader import FileAccessLog, read_counts_csv
from selfcount.domain.prior import CalibrationError
from selfcount.models.checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    load_checkpoint,
    save_checkpoint,
)
from selfcount.models.pipeline import (
    MissingCheckpointError,
    train_semi,
    train_stage1,
    train_stage2,
    train_supervised,
)

COMMANDS = ("stage1", "stage2", "semi", "supervised")
SWITCHES = ("allow_random_fen", "diagonal_pairing")


def default_checkpoint(cfg: RunConfig, stage: str) -> Path:
    return Path(cfg.output_dir) / f"{stage}.cssn"


def load_stage1(cfg: RunConfig, path: Optional[str]) -> Optional[Checkpoint]:
    """Stage-1 checkpoint from ``path``, or the default location when it exists.

    With ``allow_random_fen`` only an explicit ``path`` is loaded; the default
    location is skipped so the run really starts from a random extractor.
    """
    if path:
        return load_checkpoint(path)
    if cfg.allow_random_fen:
        return None
    fallback = default_checkpoint(cfg, "stage1")
    if fallback.exists():
        return load_checkpoint(fallback)
    return None


def run(
    command: str,
    cfg: RunConfig,
    out: Optional[str] = None,
    stage1: Optional[str] = None,
    prior_counts: Optional[str] = None,
) -> Path:
    if command not in COMMANDS:
        raise ValueError(f"command must be one of {COMMANDS}, got {command!r}")
    print(f"Starting {command} training...")
    print(f"Manifest: {cfg.manifest}")
    print(f"Mode: {cfg.mode}, seed: {cfg.seed}")

    log = FileAccessLog()
    start = time.time()
    if command == "stage1":
        ckpt = train_stage1(cfg, log=log)
    else:
        stage1_ckpt = load_stage1(cfg, stage1)
        if stage1_ckpt is not None:
            print(f"Stage 1 checkpoint: {stage1 or default_checkpoint(cfg, 'stage1')}")
        if command == "stage2":
            observed = read_counts_csv(prior_counts) if prior_counts else None
            ckpt = train_stage2(cfg, stage1_ckpt, log=log, observed_counts=observed)
        elif command == "semi":
            ckpt = train_semi(cfg, stage1_ckpt, log=log)
        else:
            ckpt = train_supervised(cfg, stage1_ckpt, log=log)
    elapsed = time.time() - start

    path = Path(out) if out else default_checkpoint(cfg, ckpt.stage)
    save_checkpoint(ckpt, path)
    path.with_name(path.name + ".cfg").write_text(cfg.render() + "\n")

    print("=" * 60)
    print(f"{command} training complete.")
    print(f"  Epochs:      {ckpt.meta.get('epochs')}")
    print(f"  Final loss:  {ckpt.meta.get('final_loss')}")
    if "best_val_accuracy" in ckpt.meta:
        print(f"  Best val acc:{ckpt.meta['best_val_accuracy']}")
    if "best_val_loss" in ckpt.meta:
        print(f"  Val loss:    {ckpt.meta['initial_val_loss']} -> {ckpt.meta['best_val_loss']}")
    print(f"  Images read: {len(log.paths('image')):,}")
    print(f"  Densities:   {len(log.paths('density')):,}")
    print(f"  Checkpoint:  {path}")
    print(f"  Elapsed:     {elapsed:.0f}s ({elapsed / 60:.1f}min)")
    return path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Train the self-supervised crowd counter")
    commands = parser.add_subparsers(dest="command", required=True)
    helps = {
        "stage1": "Rotation pretext training of the feature extractor",
        "stage2": "Sinkhorn distribution matching of the density head",
        "semi": "Stage 2 with interleaved labeled batches",
        "supervised": "Fully supervised reference run",
    }
    for name in COMMANDS:
        sub = commands.add_parser(name, help=helps[name])
        sub.add_argument("--out", default=None, help="Checkpoint path")
        add_run_config_arguments(sub, exclude=SWITCHES)
        if name == "stage1":
            continue
        sub.add_argument("--stage1", default=None, help="Stage 1 checkpoint")
        sub.add_argument(
            "--allow-random-fen",
            dest="allow_random_fen",
            action="store_true",
            default=None,
            help="Train on a randomly initialized feature extractor",
        )
        if name == "stage2":
            sub.add_argument(
                "--plus-plus",
                action="store_true",
                help="Split sparse and dense cells by edge pseudo-density",
            )
            sub.add_argument(
                "--prior-counts",
                default=None,
                help="Counts CSV backing prior_family=empirical",
            )
        if name in ("semi", "supervised"):
            sub.add_argument(
                "--diagonal-pairing",
                dest="diagonal_pairing",
                action="store_true",
                default=None,
                help="Match labeled cells by position instead of by Sinkhorn",
            )
    return parser


def main(argv: Optional[Sequence[str]] = None) -> None:
    args = build_parser().parse_args(argv)
    overrides = dict(vars(args))
    if getattr(args, "plus_plus", False):
        overrides["mode"] = "plus-plus"
    elif args.command == "semi":
        overrides["mode"] = "semi"
    try:
        cfg = load_run_config(args.config, overrides)
        run(
            args.command,
            cfg,
            out=args.out,
            stage1=getattr(args, "stage1", None),
            prior_counts=getattr(args, "prior_counts", None),
        )
    except (
        MissingCheckpointError,
        CheckpointFormatError,
        CalibrationError,
        ValueError,
        OSError,
    ) as e:
        print(f"Training failed: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()

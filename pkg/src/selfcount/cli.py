"""Umbrella ``selfcount <group> [<command>]`` entrypoint.

Dispatches to the job modules; everything after the group (and command) is
handed to that job's own argument parser.
"""

from __future__ import annotations

import sys
from typing import Callable, Dict, Optional, Sequence, Tuple

from selfcount.jobs import evaluate, features_dump, ot_eval, prior_fit, sweep, synth_gen, train

Main = Callable[[Optional[Sequence[str]]], None]

# group -> (required sub-command or None, job entrypoint)
COMMANDS: Dict[str, Tuple[Optional[str], Main]] = {
    "synth": ("gen", synth_gen.main),
    "prior": ("fit", prior_fit.main),
    "ot": ("eval", ot_eval.main),
    "train": (None, train.main),
    "eval": (None, evaluate.main),
    "sweep": (None, sweep.main),
    "features": ("dump", features_dump.main),
}

USAGE = """usage: selfcount <group> [<command>] [options]

groups:
  synth gen       generate a synthetic benchmark
  prior fit       fit parametric priors to cell counts
  ot eval         Sinkhorn loss between two count lists
  train           stage1 | stage2 | semi | supervised
  eval            evaluate a checkpoint against baselines
  sweep           retrain Stage 2 across c_fmax or alpha
  features dump   write mean feature maps of a checkpoint
"""


def main(argv: Optional[Sequence[str]] = None) -> None:
    args = list(sys.argv[1:] if argv is None else argv)
    if not args or args[0] in ("-h", "--help"):
        print(USAGE)
        sys.exit(0 if args else 2)
    group, rest = args[0], args[1:]
    if group not in COMMANDS:
        print(f"unknown group {group!r}\n\n{USAGE}")
        sys.exit(2)
    command, entry = COMMANDS[group]
    if command is not None:
        if not rest or rest[0] != command:
            print(f"usage: selfcount {group} {command} [options]")
            sys.exit(2)
        rest = rest[1:]
    entry(rest)


if __name__ == "__main__":
    main()

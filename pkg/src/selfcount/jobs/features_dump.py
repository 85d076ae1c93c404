"""Feature visualization job.

Writes the channel-mean activation of each feature-extractor block for one
P5 image as min-max normalized P5 rasters (``block1.pgm`` .. ``block3.pgm``).
``--edges`` adds the Canny edge map used for pseudo-density grouping.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from selfcount.config import RunConfig, add_run_config_arguments, load_run_config
from selfcount.data.loader import read_p5, to_uint8, write_edges, write_p5
from selfcount.models.checkpoint import CheckpointFormatError, load_checkpoint
from selfcount.models.net import OUTPUT_STRIDE, mean_feature_maps
from selfcount.processing.vision import canny


def run(
    cfg: RunConfig, checkpoint: str, image: str, out_dir: str, edges: bool = False
) -> List[Path]:
    print("Starting feature dump...")
    print(f"Checkpoint: {checkpoint}")
    print(f"Image: {image}")

    net = load_checkpoint(checkpoint).to_network()
    img = read_p5(image)
    side = min(img.height, img.width) // OUTPUT_STRIDE * OUTPUT_STRIDE
    if side == 0:
        raise ValueError(f"{image}: image too small for the network")
    img = img.crop(0, 0, side)

    out = Path(out_dir)
    written = []
    for block, raster in enumerate(mean_feature_maps(net, img), start=1):
        written.append(write_p5(to_uint8(raster), out / f"block{block}.pgm"))
    if edges:
        edge_map = canny(img, cfg.canny_sigma, cfg.canny_low, cfg.canny_high)
        written.append(write_edges(edge_map, out / "edges.pgm"))

    print("=" * 60)
    print("Feature dump complete.")
    for path in written:
        print(f"  {path}")
    return written


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Dump mean feature maps of a checkpoint")
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--image", required=True, help="P5 input image")
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--edges", action="store_true", help="Also write the Canny edge map")
    add_run_config_arguments(parser)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> None:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, vars(args))
        run(cfg, args.checkpoint, args.image, args.out, edges=args.edges)
    except (CheckpointFormatError, ValueError, OSError) as e:
        print(f"Feature dump failed: {e}")
        sys.exit(1)


if __name__ == "__main__":
    main()

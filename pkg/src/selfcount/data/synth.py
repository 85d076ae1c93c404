"""Synthetic crowd scenes with known density.

An image is a ``crops_per_side`` x ``crops_per_side`` mosaic of crops, each
split into an m x n grid of cells. Every cell draws a real-valued target
count from the prior, rounds it stochastically and places that many upright
head-and-shoulder figures at uniform positions inside the cell. Ground truth
is one unit-mass Gaussian per head.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from selfcount.data.loader import cell_columns, write_dmap, write_manifest, write_p5
from selfcount.domain.grid import DensityMap, cells_from_density
from selfcount.domain.prior import PriorSpec
from selfcount.processing.vision import GrayImage

logger = logging.getLogger(__name__)

BACKGROUND_LEVEL = 90.0
HEAD_LEVEL = 110.0
SHOULDER_LEVEL = 60.0
PIXEL_NOISE = 3.0

Seed = Union[int, np.random.SeedSequence]


class GenerationError(RuntimeError):
    """Scene parameters leave no room for the requested heads."""


@dataclass(frozen=True)
class SceneSpec:
    count_prior: PriorSpec
    crop_size: int = 96
    crops_per_side: int = 2
    m: int = 3
    n: int = 3
    head_radius_range: Tuple[float, float] = (2.0, 4.0)
    clutter_level: float = 0.3
    density_sigma: float = 1.5
    cluster_dense: bool = False

    def __post_init__(self) -> None:
        r_min, r_max = self.head_radius_range
        if not 0 < r_min <= r_max:
            raise ValueError(f"invalid head radius range {self.head_radius_range}")
        if r_max >= self.crop_size / 4:
            raise ValueError(f"head radius {r_max} must stay below crop_size / 4")
        if not 0.0 <= self.clutter_level <= 1.0:
            raise ValueError(f"clutter_level must lie in [0, 1], got {self.clutter_level}")
        if self.density_sigma <= 0:
            raise ValueError("density_sigma must be positive")
        if self.crops_per_side < 1 or self.m < 1 or self.n < 1:
            raise ValueError("crops_per_side, m and n must be positive")

    @property
    def image_size(self) -> int:
        return self.crop_size * self.crops_per_side

    @property
    def cell_shape(self) -> Tuple[int, int]:
        return self.crop_size // self.m, self.crop_size // self.n

    @property
    def cell_grid_shape(self) -> Tuple[int, int]:
        """Cells across the whole image (rows, columns)."""
        return self.m * self.crops_per_side, self.n * self.crops_per_side

    def check_feasible(self) -> None:
        cell_h, cell_w = self.cell_shape
        r_min, r_max = self.head_radius_range
        if min(cell_h, cell_w) < 2 * r_max:
            raise GenerationError(
                f"cells of {cell_h}x{cell_w} px cannot hold a head of radius {r_max}"
            )
        c_max = math.ceil(self.count_prior.c_max_cell)
        if c_max * r_min**2 > cell_h * cell_w:
            raise GenerationError(
                f"{c_max} heads of radius {r_min} do not fit in a {cell_h}x{cell_w} cell"
            )


@dataclass(frozen=True)
class Scene:
    image: GrayImage
    density: DensityMap
    # real-valued draws per image cell and the integer heads placed there
    cell_targets: np.ndarray
    cell_heads: np.ndarray
    head_count: int


def stochastic_round(values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Round up with probability equal to the fractional part (mean preserving)."""
    floor = np.floor(values)
    return (floor + (rng.random(values.shape) < values - floor)).astype(np.int64)


def _clutter(size: int, level: float, rng: np.random.Generator) -> np.ndarray:
    """Smooth value noise over a few octaves plus straight line segments."""
    field = np.zeros((size, size))
    for octave, coarse in enumerate((4, 8, 16)):
        grid = rng.standard_normal((coarse + 1, coarse + 1))
        up = ndimage.zoom(grid, size / coarse, order=3, mode="nearest")[:size, :size]
        field += up / (2**octave)
    field *= 18.0 * level

    n_lines = rng.poisson(8.0 * level)
    for _ in range(n_lines):
        y0, x0, y1, x1 = rng.uniform(0, size - 1, 4)
        steps = int(math.hypot(y1 - y0, x1 - x0)) + 1
        ys = np.linspace(y0, y1, steps).round().astype(int)
        xs = np.linspace(x0, x1, steps).round().astype(int)
        field[ys, xs] += rng.choice((-1.0, 1.0)) * rng.uniform(25.0, 50.0) * level
    return field


def _stamp_figure(canvas: np.ndarray, cy: float, cx: float, r: float) -> None:
    """Bright head disk above a wider, dimmer shoulder ellipse (pointing up)."""
    size = canvas.shape[0]
    reach = int(math.ceil(3.0 * r)) + 1
    y_lo, y_hi = max(0, int(cy) - reach), min(size, int(cy) + reach + 1)
    x_lo, x_hi = max(0, int(cx) - reach), min(size, int(cx) + reach + 1)
    if y_lo >= y_hi or x_lo >= x_hi:
        return
    yy, xx = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    head = np.clip(r + 0.5 - np.hypot(yy - cy, xx - cx), 0.0, 1.0)
    sy, sx = 0.8 * r, 1.8 * r
    body = np.hypot((yy - (cy + 1.7 * r)) / sy, (xx - cx) / sx)
    shoulders = np.clip((1.0 - body) * sy + 0.5, 0.0, 1.0)
    patch = canvas[y_lo:y_hi, x_lo:x_hi]
    np.maximum(patch, np.maximum(HEAD_LEVEL * head, SHOULDER_LEVEL * shoulders), out=patch)


def _gaussian_mass(centres: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """(len(centres), size) rows of a Gaussian, each normalized to sum to 1."""
    axis = np.arange(size)[None, :]
    weights = np.exp(-0.5 * ((axis - centres[:, None]) / sigma) ** 2)
    return weights / weights.sum(axis=1, keepdims=True)


def _cluster_order(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Cell indices sorted by distance from a random focal cell."""
    fy, fx = rng.uniform(0, rows), rng.uniform(0, cols)
    yy, xx = np.mgrid[0:rows, 0:cols]
    dist = np.hypot(yy + 0.5 - fy, xx + 0.5 - fx).reshape(-1)
    return np.argsort(dist, kind="stable")


def generate_scene(spec: SceneSpec, seed: Seed) -> Scene:
    """One image with its density, deterministic in ``seed``."""
    spec.check_feasible()
    rng = np.random.default_rng(seed)
    rows, cols = spec.cell_grid_shape
    cell_h, cell_w = spec.cell_shape
    size = spec.image_size

    targets = spec.count_prior.draw(rows * cols, rng)
    if spec.cluster_dense:
        placed = np.empty_like(targets)
        placed[_cluster_order(rows, cols, rng)] = np.sort(targets)[::-1]
        targets = placed
    targets = targets.reshape(rows, cols)
    heads = stochastic_round(targets, rng)

    r_min, r_max = spec.head_radius_range
    c_max = spec.count_prior.c_max_cell
    centres: List[Tuple[float, float]] = []
    radii: List[float] = []
    for i in range(rows):
        for j in range(cols):
            k = int(heads[i, j])
            if k == 0:
                continue
            # denser cells get smaller heads
            r = r_max - (r_max - r_min) * min(1.0, k / c_max)
            crop_i, cell_i = divmod(i, spec.m)
            crop_j, cell_j = divmod(j, spec.n)
            y0 = crop_i * spec.crop_size + cell_i * cell_h
            x0 = crop_j * spec.crop_size + cell_j * cell_w
            ys = rng.uniform(y0, y0 + cell_h, k)
            xs = rng.uniform(x0, x0 + cell_w, k)
            centres.extend(zip(ys.tolist(), xs.tolist()))
            radii.extend([r] * k)

    canvas = np.zeros((size, size))
    for (cy, cx), r in zip(centres, radii):
        _stamp_figure(canvas, cy, cx, r)
    pixels = (
        BACKGROUND_LEVEL
        + _clutter(size, spec.clutter_level, rng)
        + canvas
        + rng.normal(0.0, PIXEL_NOISE, (size, size))
    )
    image = GrayImage(np.clip(np.round(pixels), 0, 255).astype(np.uint8))

    if centres:
        points = np.asarray(centres)
        gy = _gaussian_mass(points[:, 0], size, spec.density_sigma)
        gx = _gaussian_mass(points[:, 1], size, spec.density_sigma)
        density = gy.T @ gx
    else:
        density = np.zeros((size, size))

    return Scene(
        image=image,
        density=DensityMap(density),
        cell_targets=targets,
        cell_heads=heads,
        head_count=len(centres),
    )


def scene_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def generate_dataset(
    spec: SceneSpec, n_images: int, seed: int, out_dir: Union[str, Path]
) -> pd.DataFrame:
    """Write ``n_images`` scenes plus ``manifest.csv`` under ``out_dir``.

    Images go to ``images/NNNNN.pgm`` and densities to ``density/NNNNN.dmap``;
    manifest paths are relative to ``out_dir``. ``count`` and the per-cell
    columns are sums of the stored (float32) density.
    """
    if n_images < 0:
        raise ValueError(f"n_images must be non-negative, got {n_images}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e

    columns = cell_columns(spec.m, spec.n)
    records = []
    for index in range(n_images):
        scene = generate_scene(spec, scene_seed(seed, index))
        image_rel = f"images/{index:05d}.pgm"
        density_rel = f"density/{index:05d}.dmap"
        write_p5(scene.image, out / image_rel)
        stored = DensityMap(scene.density.values.astype(np.float32))
        write_dmap(stored, out / density_rel)
        cells = cells_from_density(stored, spec.m, spec.n).counts.reshape(-1)
        records.append(
            {
                "image": image_rel,
                "density": density_rel,
                "count": stored.count,
                **dict(zip(columns, cells)),
            }
        )
        if (index + 1) % 100 == 0:
            logger.info("Generated %d/%d scenes", index + 1, n_images)

    manifest = pd.DataFrame(records, columns=["image", "density", "count", *columns])
    write_manifest(manifest, out / "manifest.csv")
    return manifest

"""Density-map bookkeeping: cell partitions, batch measures and count metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from sklearn.metrics import mean_absolute_error, mean_squared_error

from selfcount.domain.transport import EmpiricalMeasure


@dataclass(frozen=True)
class DensityMap:
    """Non-negative raster whose sum is a head count. ``values`` is (height, width)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2 or min(values.shape) < 1:
            raise ValueError(f"density map must be a non-empty 2-D array, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("density map values must be finite")
        if np.any(values < 0):
            raise ValueError("density map values must be non-negative")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def count(self) -> float:
        return float(self.values.sum(dtype=np.float64))


@dataclass(frozen=True)
class CellGrid:
    counts: np.ndarray

    @property
    def m(self) -> int:
        return int(self.counts.shape[0])

    @property
    def n(self) -> int:
        return int(self.counts.shape[1])

    @property
    def total(self) -> float:
        return float(self.counts.sum())


def band_edges(size: int, bands: int) -> np.ndarray:
    """Start offsets of ``bands`` contiguous bands; the last absorbs the remainder."""
    if bands < 1:
        raise ValueError(f"bands must be at least 1, got {bands}")
    if size < bands:
        raise ValueError(f"cannot split {size} pixels into {bands} bands")
    return np.arange(bands) * (size // bands)


def cells_from_density(d: DensityMap, m: int, n: int) -> CellGrid:
    """Sum a density map over an m x n partition of its rows and columns."""
    if d.height < m or d.width < n:
        raise ValueError(
            f"density map {d.height}x{d.width} is smaller than the {m}x{n} grid"
        )
    values = d.values.astype(np.float64, copy=False)
    rows = np.add.reduceat(values, band_edges(d.height, m), axis=0)
    counts = np.add.reduceat(rows, band_edges(d.width, n), axis=1)
    return CellGrid(counts)


def cells_by_size(d: DensityMap, cell_h: int, cell_w: int) -> CellGrid:
    """Cell-size parameterisation: as many whole cells as fit, remainder to the last."""
    if cell_h < 1 or cell_w < 1:
        raise ValueError("cell sizes must be positive")
    m = max(1, d.height // cell_h)
    n = max(1, d.width // cell_w)
    return cells_from_density(d, m, n)


def batch_measure(grids: Sequence[CellGrid]) -> EmpiricalMeasure:
    """Flatten the cells of a batch (batch order, row-major) into one measure."""
    if len(grids) == 0:
        raise ValueError("batch_measure needs at least one grid")
    return EmpiricalMeasure(np.concatenate([g.counts.reshape(-1) for g in grids]))


def mae_mse(
    pred_counts: Sequence[float], gt_counts: Sequence[float]
) -> Tuple[float, float]:
    """MAE and root-mean-squared count error over images."""
    if len(pred_counts) != len(gt_counts):
        raise ValueError(
            f"length mismatch: {len(pred_counts)} predictions, {len(gt_counts)} counts"
        )
    if len(pred_counts) == 0:
        raise ValueError("need at least one image")
    mae = mean_absolute_error(gt_counts, pred_counts)
    mse = math.sqrt(mean_squared_error(gt_counts, pred_counts))
    return float(mae), float(mse)


def crop_tiles(height: int, width: int, crop: int) -> List[Tuple[int, int]]:
    """Top-left corners of a deterministic crop cover of an image.

    Tiles step by ``crop``; a final tile is aligned to the far border when the
    image is not a multiple of the crop, so every pixel is covered.
    """
    if crop > height or crop > width:
        raise ValueError(f"crop {crop} larger than image {height}x{width}")

    def starts(size: int) -> List[int]:
        points = list(range(0, size - crop + 1, crop))
        if points[-1] + crop < size:
            points.append(size - crop)
        return points

    return [(y, x) for y in starts(height) for x in starts(width)]

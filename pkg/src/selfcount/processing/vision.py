"""Image-plane operations used by both training stages.

Rasters are numpy arrays indexed (row, column). Edge maps are boolean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from selfcount.domain.grid import CellGrid, DensityMap, cells_from_density
from selfcount.domain.prior import PriorSpec

DEFAULT_CANNY_SIGMA = 1.4
DEFAULT_CANNY_LOW = 0.1
DEFAULT_CANNY_HIGH = 0.25
DEFAULT_BLUR_SIGMA = 2.0
DEFAULT_PERCENTILE = 30.0


@dataclass(frozen=True)
class GrayImage:
    """8-bit grayscale raster, ``pixels`` shaped (height, width)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2 or min(pixels.shape) < 1:
            raise ValueError(f"image must be a non-empty 2-D array, got {pixels.shape}")
        object.__setattr__(self, "pixels", pixels.astype(np.uint8, copy=False))

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def crop(self, top: int, left: int, size: int) -> "GrayImage":
        if top < 0 or left < 0 or top + size > self.height or left + size > self.width:
            raise ValueError(
                f"crop ({top}, {left}, {size}) outside image {self.height}x{self.width}"
            )
        return GrayImage(self.pixels[top : top + size, left : left + size])

    def as_float(self) -> np.ndarray:
        """Pixels scaled to [0, 1] as float32."""
        return self.pixels.astype(np.float32) / 255.0


@dataclass(frozen=True)
class PseudoDensity:
    map: DensityMap
    pseudo_counts: CellGrid


def rotate90(img: GrayImage, k: int) -> GrayImage:
    """Counter-clockwise rotation by ``k`` quarter turns."""
    if k not in (0, 1, 2, 3):
        raise ValueError(f"k must be one of 0..3, got {k}")
    return GrayImage(np.ascontiguousarray(np.rot90(img.pixels, k)))


# neighbour offsets (dy, dx) along the quantized gradient direction
_DIRECTIONS = ((0, 1), (1, 1), (1, 0), (1, -1))


def _shift(padded: np.ndarray, dy: int, dx: int, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    return padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]


def canny(
    img: GrayImage,
    sigma: float = DEFAULT_CANNY_SIGMA,
    low: float = DEFAULT_CANNY_LOW,
    high: float = DEFAULT_CANNY_HIGH,
) -> np.ndarray:
    """Canny edge detection with thresholds relative to the peak gradient.

    Args:
        img: Input image.
        sigma: Gaussian smoothing scale in pixels.
        low: Hysteresis low threshold as a fraction of the largest gradient.
        high: Hysteresis high threshold as a fraction of the largest gradient.

    Returns:
        Boolean edge raster of the image's shape.
    """
    if not high >= low > 0:
        raise ValueError(f"need high >= low > 0, got low={low}, high={high}")

    smoothed = ndimage.gaussian_filter(img.pixels.astype(np.float64), sigma, mode="nearest")
    gx = ndimage.sobel(smoothed, axis=1, mode="nearest")
    gy = ndimage.sobel(smoothed, axis=0, mode="nearest")
    magnitude = np.hypot(gx, gy)
    peak = magnitude.max()
    if peak <= 0:
        return np.zeros(magnitude.shape, dtype=bool)

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    padded = np.pad(magnitude, 1)
    shape = magnitude.shape
    keep = np.zeros(shape, dtype=bool)
    for index, (dy, dx) in enumerate(_DIRECTIONS):
        ahead = _shift(padded, dy, dx, shape)
        behind = _shift(padded, -dy, -dx, shape)
        # ties go to the pixel further along the gradient, one pixel per ridge
        local_max = (magnitude >= behind) & (magnitude > ahead)
        keep |= (sector == index) & local_max
    thinned = np.where(keep, magnitude, 0.0)
    thinned[[0, -1], :] = 0.0
    thinned[:, [0, -1]] = 0.0

    strong = thinned >= high * peak
    weak = thinned >= low * peak
    labels, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    connected = np.unique(labels[strong])
    connected = connected[connected > 0]
    return np.isin(labels, connected)


def _area_weights(size_in: int, size_out: int) -> np.ndarray:
    """(size_out, size_in) matrix integrating input pixels into output pixels."""
    bounds = np.linspace(0.0, size_in, size_out + 1)
    pixel = np.arange(size_in)[None, :]
    lo = bounds[:-1, None]
    hi = bounds[1:, None]
    return np.clip(np.minimum(hi, pixel + 1) - np.maximum(lo, pixel), 0.0, None)


def area_downsample(raster: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Mass-preserving area resampling of a 2-D raster."""
    h, w = raster.shape
    if out_h > h or out_w > w or out_h < 1 or out_w < 1:
        raise ValueError(f"cannot downsample {h}x{w} to {out_h}x{out_w}")
    return _area_weights(h, out_h) @ raster @ _area_weights(w, out_w).T


def pseudo_density(
    edges: np.ndarray,
    blur_sigma: float = DEFAULT_BLUR_SIGMA,
    out_w: Optional[int] = None,
    out_h: Optional[int] = None,
    m: int = 3,
    n: int = 3,
) -> PseudoDensity:
    """Blur an edge raster and downsample it to density-map resolution."""
    raster = np.asarray(edges, dtype=np.float64)
    out_h = out_h or raster.shape[0]
    out_w = out_w or raster.shape[1]
    blurred = ndimage.gaussian_filter(raster, blur_sigma, mode="reflect")
    density = DensityMap(np.clip(area_downsample(blurred, out_h, out_w), 0.0, None))
    return PseudoDensity(map=density, pseudo_counts=cells_from_density(density, m, n))


def group_by_percentile(
    pseudo_counts: Sequence[float],
    prior: Optional[PriorSpec] = None,
    percentile: Optional[float] = DEFAULT_PERCENTILE,
) -> np.ndarray:
    """Label the lowest ``percentile`` % of samples sparse (0), the rest dense (1).

    Ranking is stable, so ties keep their input order. When ``percentile`` is
    None the split point is taken from the prior's head mass.
    """
    values = np.asarray(pseudo_counts, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValueError("group_by_percentile needs at least one sample")
    if percentile is None:
        if prior is None:
            raise ValueError("percentile or prior required")
        percentile = 100.0 * prior.head_mass_fraction
    if not 0.0 <= percentile <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {percentile}")
    n_sparse = int(math.floor(percentile * values.size / 100.0 + 0.5))
    order = np.argsort(values, kind="stable")
    labels = np.ones(values.size, dtype=np.int64)
    labels[order[:n_sparse]] = 0
    return labels

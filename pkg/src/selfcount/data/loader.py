"""Dataset I/O: P5 images, DMAP density files, manifests and count lists.

Training code never opens files directly. It goes through the sources at
the bottom of this module, which record every path they open in a
:class:`FileAccessLog`. :class:`UnlabeledImageSource` only knows the image
column of a manifest, so the self-supervised stages cannot reach ground truth.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

from selfcount.domain.grid import DensityMap
from selfcount.processing.vision import GrayImage

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DMAP_MAGIC = b"DMAP"
MANIFEST_COLUMNS = ("image", "density", "count")


def read_p5(path: PathLike) -> GrayImage:
    """Read a binary portable graymap."""
    try:
        with Image.open(path) as img:
            mode = img.mode
            pixels = np.array(img, dtype=np.uint8)
    except OSError as e:
        raise OSError(f"cannot read image {path}: {e}") from e
    if mode != "L":
        raise ValueError(f"{path}: expected an 8-bit grayscale image, got mode {mode}")
    return GrayImage(pixels)


def write_p5(img: Union[GrayImage, np.ndarray], path: PathLike) -> Path:
    path = Path(path)
    pixels = img.pixels if isinstance(img, GrayImage) else np.asarray(img, dtype=np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(path, format="PPM")
    except OSError as e:
        raise OSError(f"cannot write image {path}: {e}") from e
    return path


def to_uint8(raster: np.ndarray) -> np.ndarray:
    """Min-max normalize a raster to 0..255. Constant rasters map to 0."""
    raster = np.asarray(raster, dtype=np.float64)
    lo, hi = raster.min(), raster.max()
    if hi <= lo:
        return np.zeros(raster.shape, dtype=np.uint8)
    return np.round(255.0 * (raster - lo) / (hi - lo)).astype(np.uint8)


def write_edges(edges: np.ndarray, path: PathLike) -> Path:
    """Edge raster as P5 with values {0, 255}."""
    return write_p5(np.where(np.asarray(edges, dtype=bool), 255, 0).astype(np.uint8), path)


def encode_dmap(d: DensityMap) -> bytes:
    values = np.ascontiguousarray(d.values, dtype="<f4")
    return DMAP_MAGIC + struct.pack("<II", d.width, d.height) + values.tobytes()


def decode_dmap(data: bytes, source: str = "<bytes>") -> DensityMap:
    if len(data) < 12 or data[:4] != DMAP_MAGIC:
        raise ValueError(f"{source}: not a DMAP file")
    width, height = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * width * height
    if len(data) != expected:
        raise ValueError(
            f"{source}: expected {expected} bytes for {width}x{height}, got {len(data)}"
        )
    values = np.frombuffer(data, dtype="<f4", offset=12).reshape(height, width)
    return DensityMap(values.astype(np.float32))


def write_dmap(d: DensityMap, path: PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_dmap(d))
    except OSError as e:
        raise OSError(f"cannot write density map {path}: {e}") from e
    return path


def read_dmap(path: PathLike) -> DensityMap:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read density map {path}: {e}") from e
    return decode_dmap(data, source=str(path))


def cell_columns(m: int, n: int) -> List[str]:
    return [f"c{i}{j}" for i in range(m) for j in range(n)]


def write_manifest(rows: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        rows.to_csv(path, index=False, float_format="%.6f")
    except OSError as e:
        raise OSError(f"cannot write manifest {path}: {e}") from e
    return path


def read_manifest(path: PathLike) -> pd.DataFrame:
    """Load a manifest; image and density paths are resolved against its directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        df = pd.DataFrame(columns=list(MANIFEST_COLUMNS))
    if "image" not in df.columns:
        raise ValueError(f"{path}: manifest lacks an image column")
    base = path.parent
    for column in ("image", "density"):
        if column in df.columns:
            df[column] = [str(base / p) if isinstance(p, str) else p for p in df[column]]
    return df


def read_counts_csv(path: PathLike) -> np.ndarray:
    """One count per line, no header."""
    try:
        frame = pd.read_csv(path, header=None, comment="#")
    except pd.errors.EmptyDataError:
        return np.zeros(0)
    except OSError as e:
        raise OSError(f"cannot read counts {path}: {e}") from e
    return frame.iloc[:, 0].to_numpy(dtype=float)


def write_counts_csv(values: Iterable[float], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.Series(list(values), dtype=float).to_csv(path, index=False, header=False)
    return path


@dataclass
class FileAccessLog:
    """Every (kind, path) opened through a source, in order."""

    entries: List[Tuple[str, str]] = field(default_factory=list)

    def record(self, kind: str, path: PathLike) -> None:
        logger.debug("open %s %s", kind, path)
        self.entries.append((kind, str(path)))

    def paths(self, kind: Optional[str] = None) -> List[str]:
        return [p for k, p in self.entries if kind is None or k == kind]


class UnlabeledImageSource:
    """Images of a manifest and nothing else.

    Ground-truth columns are dropped on construction; there is no method
    that returns a density or a count.
    """

    def __init__(self, image_paths: Sequence[PathLike], log: Optional[FileAccessLog] = None):
        self._paths = [str(p) for p in image_paths]
        self.log = log if log is not None else FileAccessLog()

    @classmethod
    def from_manifest(
        cls, manifest: PathLike, log: Optional[FileAccessLog] = None
    ) -> "UnlabeledImageSource":
        log = log if log is not None else FileAccessLog()
        log.record("manifest", manifest)
        return cls(read_manifest(manifest)["image"].tolist(), log)

    def __len__(self) -> int:
        return len(self._paths)

    def subset(self, indices: Sequence[int]) -> "UnlabeledImageSource":
        return UnlabeledImageSource([self._paths[i] for i in indices], self.log)

    def image(self, index: int) -> GrayImage:
        path = self._paths[index]
        self.log.record("image", path)
        return read_p5(path)

    def images(self) -> List[GrayImage]:
        return [self.image(i) for i in range(len(self))]


class LabeledSource(UnlabeledImageSource):
    """Images plus their ground-truth density maps."""

    def __init__(
        self,
        image_paths: Sequence[PathLike],
        density_paths: Sequence[PathLike],
        log: Optional[FileAccessLog] = None,
    ):
        if len(image_paths) != len(density_paths):
            raise ValueError("image and density path lists differ in length")
        super().__init__(image_paths, log)
        self._densities = [str(p) for p in density_paths]

    @classmethod
    def from_manifest(
        cls, manifest: PathLike, log: Optional[FileAccessLog] = None
    ) -> "LabeledSource":
        log = log if log is not None else FileAccessLog()
        log.record("manifest", manifest)
        df = read_manifest(manifest)
        if "density" not in df.columns:
            raise ValueError(f"{manifest}: manifest has no density column")
        return cls(df["image"].tolist(), df["density"].tolist(), log)

    def unlabeled(self) -> UnlabeledImageSource:
        """The same images without access to their densities."""
        return UnlabeledImageSource(self._paths, self.log)

    def subset(self, indices: Sequence[int]) -> "LabeledSource":
        return LabeledSource(
            [self._paths[i] for i in indices], [self._densities[i] for i in indices], self.log
        )

    def density(self, index: int) -> DensityMap:
        path = self._densities[index]
        self.log.record("density", path)
        return read_dmap(path)

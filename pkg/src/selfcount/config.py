"""Centralized runtime configuration for selfcount.

Process-level settings (log level, seed fallback, output directory) come from
environment variables so the tools behave the same locally and in batch jobs.
Per-run training knobs live in :class:`RunConfig`, read from a flat
``key=value`` file and overridden by command-line flags.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import os
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any, Collection, Dict, Mapping, Optional

if TYPE_CHECKING:
    from selfcount.domain.prior import PriorSpec


def configure_logging(level: Optional[str] = None) -> logging.Logger:
    """Configure structured logging for the application."""
    log_level = (level or os.getenv("LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    return logging.getLogger("selfcount")


@dataclass(frozen=True)
class Settings:
    """Runtime settings populated from environment variables."""

    log_level: str
    seed: int
    output_dir: str
    config_path: str


def load_settings() -> Settings:
    """Load settings from environment variables."""
    # Optional .env file for local development.
    env_path = Path.cwd() / ".env"
    if env_path.exists():
        try:
            from dotenv import load_dotenv

            load_dotenv(env_path)
        except ImportError:  # pragma: no cover
            pass

    return Settings(
        log_level=os.getenv("LOG_LEVEL", "INFO"),
        seed=int(os.getenv("CSSCCNN_SEED", "0")),
        output_dir=os.getenv("SELFCOUNT_OUTPUT_DIR", "runs"),
        config_path=os.getenv("SELFCOUNT_CONFIG", ""),
    )


MODES = ("plain", "plus-plus", "semi")
PRIOR_FAMILIES = ("truncated-power-law", "uniform", "empirical")


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a training / evaluation run.

    Defaults follow the desk-scale synthetic benchmark. ``seed`` stays ``None``
    until :func:`load_run_config` resolves it against ``CSSCCNN_SEED``.
    """

    # data
    manifest: str = "data/train/manifest.csv"
    test_manifest: str = "data/test/manifest.csv"
    output_dir: str = "runs"
    val_fraction: float = 0.10

    # prior
    alpha: float = 2.0
    c_fmax: float = 720.0
    s_crop: int = 4
    m: int = 3
    n: int = 3
    cell_size: int = 0  # px; when > 0 whole cells of this side replace the m x n grid
    s_images: int = 0
    head_mass_fraction: float = 0.30
    prior_family: str = "truncated-power-law"

    # transport
    beta: float = 10.0
    sinkhorn_max_iter: int = 500
    sinkhorn_tol: float = 1e-6

    # network
    width1: int = 16
    width2: int = 32
    width3: int = 64
    rot_width: int = 64
    head_width: int = 16
    use_skip: bool = True
    rotation_classes: int = 4

    # stage 1
    stage1_crop: int = 112
    stage1_epochs: int = 30
    stage1_patience: int = 5
    stage1_crops_per_image: int = 4
    stage1_batch_size: int = 16
    lr_stage1: float = 1e-3

    # stage 2
    stage2_crop: int = 96
    stage2_epochs: int = 200
    stage2_patience: int = 20
    batch_size: int = 32
    lr_stage2: float = 1e-4
    momentum: float = 0.9
    allow_random_fen: bool = False

    # plus-plus
    mode: str = "plain"
    percentile: float = 30.0
    canny_sigma: float = 1.4
    canny_low: float = 0.1
    canny_high: float = 0.25
    pseudo_blur_sigma: float = 2.0

    # semi-supervised
    labeled: int = 0
    ratio: str = "5:1"
    diagonal_pairing: bool = False

    seed: Optional[int] = None

    def __post_init__(self) -> None:
        positive = (
            "alpha",
            "c_fmax",
            "s_crop",
            "m",
            "n",
            "beta",
            "sinkhorn_max_iter",
            "sinkhorn_tol",
            "batch_size",
            "stage1_crop",
            "stage2_crop",
            "stage1_batch_size",
            "stage1_crops_per_image",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.prior_family not in PRIOR_FAMILIES:
            raise ValueError(
                f"prior_family must be one of {PRIOR_FAMILIES}, got {self.prior_family!r}"
            )
        if self.rotation_classes not in (2, 4):
            raise ValueError("rotation_classes must be 2 or 4")
        if self.stage2_crop % 4 or self.stage1_crop % 4:
            raise ValueError("crop sizes must be divisible by the output stride 4")
        if self.cell_size < 0:
            raise ValueError(f"cell_size must be non-negative, got {self.cell_size}")
        if self.cell_size and (self.cell_size % 4 or self.stage2_crop % self.cell_size):
            raise ValueError(
                f"cell_size {self.cell_size} must be a multiple of 4 dividing stage2_crop"
            )
        self.ratio_parts()

    def grid_shape(self) -> tuple[int, int]:
        """Cells per Stage-2 crop, (rows, columns)."""
        if self.cell_size:
            side = self.stage2_crop // self.cell_size
            return side, side
        return self.m, self.n

    def ratio_parts(self) -> tuple[int, int]:
        """Parse ``ratio`` ("unlabeled:labeled") into a pair of batch counts."""
        try:
            unlabeled, labeled = (int(part) for part in self.ratio.split(":"))
        except ValueError as e:
            raise ValueError(f"ratio must look like '5:1', got {self.ratio!r}") from e
        if unlabeled < 0 or labeled < 0 or unlabeled + labeled == 0:
            raise ValueError(f"ratio must have non-negative parts, got {self.ratio!r}")
        return unlabeled, labeled

    def as_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def render(self) -> str:
        """Flat ``key=value`` rendering, one key per line, sorted."""
        return "\n".join(f"{k}={v}" for k, v in sorted(self.as_dict().items()))

    def config_hash(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def prior_spec(self, s_images: int) -> "PriorSpec":
        """Calibrated truncated power-law prior for a dataset of ``s_images``."""
        from selfcount.domain.prior import PriorSpec

        rows, cols = self.grid_shape()
        return PriorSpec.from_crowd(
            alpha=self.alpha,
            c_fmax=self.c_fmax,
            m=rows,
            n=cols,
            s_crop=self.s_crop,
            s_images=self.s_images or s_images,
            head_mass_fraction=self.head_mass_fraction,
        )


_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _field_types() -> Dict[str, Any]:
    return typing.get_type_hints(RunConfig)


def _coerce(name: str, raw: Any, annotation: Any) -> Any:
    """Coerce a raw (usually string) value to the annotated field type."""
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in typing.get_args(annotation) if a is not type(None)]
        if raw is None or (isinstance(raw, str) and raw.lower() in ("", "none")):
            return None
        return _coerce(name, raw, inner[0])
    if not isinstance(raw, str):
        return annotation(raw)
    text = raw.strip()
    if annotation is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError(f"{name}: cannot interpret {raw!r} as a boolean")
    try:
        return annotation(text)
    except ValueError as e:
        raise ValueError(f"{name}: cannot interpret {raw!r} as {annotation.__name__}") from e


def read_config_file(path: str | Path) -> Dict[str, str]:
    """Parse a flat ``key=value`` file. Unknown keys are rejected."""
    known = {f.name for f in fields(RunConfig)}
    values: Dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def load_run_config(
    path: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    settings: Optional[Settings] = None,
) -> RunConfig:
    """Resolve a RunConfig: defaults, then the config file, then overrides.

    ``overrides`` entries whose value is ``None`` are ignored so argparse
    namespaces can be passed straight through. The seed falls back to the
    ``CSSCCNN_SEED`` environment setting.
    """
    settings = settings or load_settings()
    types_ = _field_types()
    merged: Dict[str, Any] = {}
    config_path = path or settings.config_path
    if config_path:
        merged.update(read_config_file(config_path))
    for key, value in (overrides or {}).items():
        key = key.replace("-", "_")
        if value is None or key not in types_:
            continue
        merged[key] = value

    kwargs = {key: _coerce(key, value, types_[key]) for key, value in merged.items()}
    if kwargs.get("seed") is None:
        kwargs["seed"] = settings.seed
    kwargs.setdefault("output_dir", settings.output_dir)
    return RunConfig(**kwargs)


def add_run_config_arguments(parser: Any, exclude: Collection[str] = ()) -> None:
    """Expose every RunConfig key as a ``--key`` flag on an argparse parser.

    Keys listed in ``exclude`` are left for the caller to declare itself
    (usually as bare switches such as ``--allow-random-fen``).
    """
    parser.add_argument("--config", default=None, help="flat key=value config file")
    for f in fields(RunConfig):
        if f.name in exclude:
            continue
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(
            flag,
            dest=f.name,
            default=None,
            help=f"override {f.name} (default {f.default})",
        )


settings = load_settings()
logger = configure_logging(settings.log_level)

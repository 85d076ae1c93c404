"""Training stages, evaluation and sensitivity sweeps.

Stage 1 trains the feature extractor on rotation classification. Stage 2
freezes it and fits the density head by matching predicted cell counts to
prior samples with the Sinkhorn loss. Semi-supervised training interleaves
labeled batches into Stage 2. Every random choice draws from a generator
derived from ``(seed, stream)``, so runs repeat bit-for-bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from selfcount.config import RunConfig, settings
from selfcount.data.loader import (
    FileAccessLog,
    LabeledSource,
    UnlabeledImageSource,
    read_manifest,
)
from selfcount.domain.grid import (
    CellGrid,
    DensityMap,
    band_edges,
    cells_by_size,
    cells_from_density,
    crop_tiles,
    mae_mse,
)
from selfcount.domain.prior import CountPrior, PriorSpec, build_prior
from selfcount.domain.transport import EmpiricalMeasure, sinkhorn, sinkhorn_grad, split_sinkhorn
from selfcount.models.checkpoint import Checkpoint
from selfcount.models.net import (
    DENSITY_PREFIX,
    OUTPUT_STRIDE,
    Network,
    softmax_cross_entropy,
)
from selfcount.processing.vision import (
    GrayImage,
    canny,
    group_by_percentile,
    pseudo_density,
    rotate90,
)

logger = logging.getLogger(__name__)

# generator streams
STREAM_SPLIT = 0
STREAM_STAGE1 = 1
STREAM_STAGE1_VAL = 2
STREAM_STAGE2 = 3
STREAM_STAGE2_VAL = 4
STREAM_HEAD = 5
STREAM_LABELED = 6
STREAM_BASELINE = 7

FEATURE_CHUNK = 16
REPORT_COLUMNS = ["mode", "method", "mae", "mse", "n_images"]
SWEEP_PARAMETERS = ("c_fmax", "alpha")


class MissingCheckpointError(RuntimeError):
    """Stage 2 needs a Stage 1 checkpoint unless a random FEN is allowed."""


class EarlyStopping:
    """Track the best validation value and count epochs without improvement.

    ``should_stop`` turns true once ``patience`` epochs in a row failed to
    improve, so ``patience=0`` stops after the first epoch.
    """

    def __init__(self, patience: int, mode: str = "min", min_delta: float = 0.0):
        if patience < 0:
            raise ValueError(f"patience must be non-negative, got {patience}")
        if mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
        self.patience = patience
        self.mode = mode
        self.min_delta = min_delta
        self.counter = 0
        self.best: Optional[float] = None

    def step(self, value: float) -> bool:
        """Record one epoch's value; True when it is a new best."""
        if self.best is None:
            improved = True
        elif self.mode == "min":
            improved = value < self.best - self.min_delta
        else:
            improved = value > self.best + self.min_delta
        if improved:
            self.best = value
            self.counter = 0
        else:
            self.counter += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.best is not None and self.counter >= self.patience


def _seed(cfg: RunConfig) -> int:
    return cfg.seed if cfg.seed is not None else settings.seed


def _rng(cfg: RunConfig, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([_seed(cfg), stream, *extra])


def split_indices(n: int, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split of ``n`` items; a single item serves both."""
    if n == 0:
        raise ValueError("empty dataset")
    if n == 1:
        return np.array([0]), np.array([0])
    train, val = train_test_split(np.arange(n), test_size=val_fraction, random_state=seed)
    return np.sort(train), np.sort(val)


def build_network(cfg: RunConfig) -> Network:
    return Network.initialize(
        seed=_seed(cfg),
        width1=cfg.width1,
        width2=cfg.width2,
        width3=cfg.width3,
        rot_width=cfg.rot_width,
        head_width=cfg.head_width,
        use_skip=cfg.use_skip,
        rotation_classes=cfg.rotation_classes,
    )


def _fit_crop(requested: int, images: Sequence[GrayImage]) -> int:
    side = min(min(img.height, img.width) for img in images)
    crop = min(requested, side) // OUTPUT_STRIDE * OUTPUT_STRIDE
    if crop < OUTPUT_STRIDE:
        raise ValueError(f"images of side {side} px are too small to crop")
    return crop


def cell_grid(cfg: RunConfig, crop: int) -> Tuple[int, int]:
    """Cells per crop: whole ``cell_size`` cells when set, else the m x n grid."""
    if cfg.cell_size:
        side = max(1, crop // cfg.cell_size)
        return side, side
    return cfg.m, cfg.n


def crop_cells(d: DensityMap, cfg: RunConfig) -> CellGrid:
    """Per-cell counts of a full-resolution crop density."""
    if cfg.cell_size:
        return cells_by_size(d, cfg.cell_size, cfg.cell_size)
    return cells_from_density(d, cfg.m, cfg.n)


# ---------------------------------------------------------------------------
# Stage 1: rotation pretext
# ---------------------------------------------------------------------------


def rotation_crops(
    images: Sequence[GrayImage],
    crop: int,
    per_image: int,
    classes: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """Random square crops, each rotated by a uniformly drawn class.

    With four classes label k means k quarter turns; with two classes the
    labels stand for 0 and 180 degrees.
    """
    quarter_turns = 4 // classes
    xs, ys = [], []
    for img in images:
        for _ in range(per_image):
            top = int(rng.integers(0, img.height - crop + 1))
            left = int(rng.integers(0, img.width - crop + 1))
            label = int(rng.integers(classes))
            rotated = rotate90(img.crop(top, left, crop), label * quarter_turns)
            xs.append(rotated.as_float())
            ys.append(label)
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def rotation_accuracy(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    correct = 0
    for start in range(0, len(y), batch_size):
        logits = net.forward_rotation(x[start : start + batch_size])
        correct += int(np.sum(logits.argmax(axis=1) == y[start : start + batch_size]))
    return correct / len(y)


def train_stage1(
    cfg: RunConfig,
    source: Optional[UnlabeledImageSource] = None,
    log: Optional[FileAccessLog] = None,
) -> Checkpoint:
    """Rotation-classification pretraining; returns the best-validation checkpoint."""
    seed = _seed(cfg)
    source = source or UnlabeledImageSource.from_manifest(cfg.manifest, log)
    images = source.images()
    if not images:
        raise ValueError(f"empty dataset: {cfg.manifest}")
    train_idx, val_idx = split_indices(len(images), cfg.val_fraction, seed)
    train_images = [images[i] for i in train_idx]
    crop = _fit_crop(cfg.stage1_crop, images)
    classes = cfg.rotation_classes

    net = build_network(cfg)
    val_x, val_y = rotation_crops(
        [images[i] for i in val_idx],
        crop,
        cfg.stage1_crops_per_image,
        classes,
        _rng(cfg, STREAM_STAGE1_VAL),
    )
    rng = _rng(cfg, STREAM_STAGE1)
    stopper = EarlyStopping(cfg.stage1_patience, mode="max")
    best = net.copy()
    epoch_loss = math.nan
    epoch = 0

    logger.info(
        "Stage 1: %d train / %d val images, %dpx crops, %d classes",
        len(train_idx),
        len(val_idx),
        crop,
        classes,
    )
    for epoch in range(1, cfg.stage1_epochs + 1):
        x, y = rotation_crops(train_images, crop, cfg.stage1_crops_per_image, classes, rng)
        order = rng.permutation(len(y))
        losses = []
        for start in range(0, len(order), cfg.stage1_batch_size):
            idx = order[start : start + cfg.stage1_batch_size]
            logits = net.forward_rotation(x[idx])
            loss, dlogits = softmax_cross_entropy(logits, y[idx])
            net.sgd_step(net.backward(dlogits), cfg.lr_stage1, cfg.momentum)
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
        accuracy = rotation_accuracy(net, val_x, val_y, cfg.stage1_batch_size)
        if stopper.step(accuracy):
            best = net.copy()
        logger.info(
            "Stage 1 epoch %d: loss=%.4f val_acc=%.3f (no improvement %d/%d)",
            epoch,
            epoch_loss,
            accuracy,
            stopper.counter,
            cfg.stage1_patience,
        )
        if stopper.should_stop:
            break

    ckpt = Checkpoint.from_network(best, "stage1", seed, cfg.config_hash())
    ckpt.meta.update(
        epochs=str(epoch), final_loss=repr(epoch_loss), best_val_accuracy=repr(stopper.best)
    )
    return ckpt


# ---------------------------------------------------------------------------
# Stage 2: distribution matching
# ---------------------------------------------------------------------------


@dataclass
class CropPool:
    """Frozen-FEN features of a fixed crop cover, with optional per-cell side data."""

    f2: np.ndarray
    f3: np.ndarray
    pseudo: Optional[np.ndarray] = None
    truth: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.f2.shape[0])


def tile_crops(
    images: Sequence[GrayImage], crop: int
) -> Tuple[List[GrayImage], List[Tuple[int, int, int]]]:
    """Deterministic tile cover of every image; origins are (image, top, left)."""
    crops, origins = [], []
    for index, img in enumerate(images):
        for top, left in crop_tiles(img.height, img.width, crop):
            crops.append(img.crop(top, left, crop))
            origins.append((index, top, left))
    return crops, origins


def build_pool(
    net: Network,
    images: Sequence[GrayImage],
    cfg: RunConfig,
    with_pseudo: bool = False,
    truth_maps: Optional[Sequence[DensityMap]] = None,
) -> CropPool:
    crop = _fit_crop(cfg.stage2_crop, images)
    crops, origins = tile_crops(images, crop)
    f2_parts, f3_parts = [], []
    for start in range(0, len(crops), FEATURE_CHUNK):
        f2, f3 = net.fen_features(crops[start : start + FEATURE_CHUNK])
        f2_parts.append(f2)
        f3_parts.append(f3)
    pool = CropPool(f2=np.concatenate(f2_parts), f3=np.concatenate(f3_parts))

    side = crop // OUTPUT_STRIDE
    m, n = cell_grid(cfg, crop)
    if with_pseudo:
        pool.pseudo = np.stack(
            [
                pseudo_density(
                    canny(c, cfg.canny_sigma, cfg.canny_low, cfg.canny_high),
                    cfg.pseudo_blur_sigma,
                    out_w=side,
                    out_h=side,
                    m=m,
                    n=n,
                ).pseudo_counts.counts.reshape(-1)
                for c in crops
            ]
        )
    if truth_maps is not None:
        pool.truth = np.stack(
            [
                crop_cells(
                    DensityMap(truth_maps[i].values[top : top + crop, left : left + crop]), cfg
                ).counts.reshape(-1)
                for i, top, left in origins
            ]
        )
    return pool


def density_cells(maps: np.ndarray, m: int, n: int) -> np.ndarray:
    """Per-cell sums of a batch of maps, (B, h, w) -> (B, m, n)."""
    maps = maps.astype(np.float64, copy=False)
    rows = np.add.reduceat(maps, band_edges(maps.shape[1], m), axis=1)
    return np.add.reduceat(rows, band_edges(maps.shape[2], n), axis=2)


def spread_cells(cell_values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse bookkeeping of :func:`density_cells`: each pixel gets its cell's value."""
    _, m, n = cell_values.shape
    row_band = np.searchsorted(band_edges(height, m), np.arange(height), side="right") - 1
    col_band = np.searchsorted(band_edges(width, n), np.arange(width), side="right") - 1
    return cell_values[:, row_band][:, :, col_band]


def batch_loss(
    pred: np.ndarray,
    target: np.ndarray,
    cfg: RunConfig,
    pred_groups: Optional[np.ndarray] = None,
    target_groups: Optional[np.ndarray] = None,
    diagonal: bool = False,
    scale: float = 1.0,
) -> Tuple[float, np.ndarray]:
    """Loss between predicted and target cell counts, and its gradient w.r.t. ``pred``.

    Counts are divided by ``scale`` (the per-cell maximum) before matching, so
    transport costs stay in [0, 1] and one ``beta`` serves every dataset.
    """
    pred = pred / scale
    target = target / scale
    if diagonal:
        diff = pred - target
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size / scale
    a = EmpiricalMeasure(np.maximum(target, 0.0))
    b = EmpiricalMeasure(pred)
    if pred_groups is not None and target_groups is not None:
        split = split_sinkhorn(
            a,
            b,
            target_groups,
            pred_groups,
            beta=cfg.beta,
            max_iter=cfg.sinkhorn_max_iter,
            tol=cfg.sinkhorn_tol,
        )
        return split.loss, split.grad / scale
    result = sinkhorn(a, b, beta=cfg.beta, max_iter=cfg.sinkhorn_max_iter, tol=cfg.sinkhorn_tol)
    return result.loss, sinkhorn_grad(result, a, b) / scale


def _init_density_head(net: Network, cfg: RunConfig, bias: float = 0.0) -> None:
    """Fresh density head on top of ``net``'s FEN; only the head stays trainable."""
    fresh = Network.initialize(
        seed=int(_rng(cfg, STREAM_HEAD).integers(2**31)),
        width1=net.params["fen.block1.conv1.w"].shape[0],
        width2=net.params["fen.block2.conv2.w"].shape[0],
        width3=net.params["fen.block3.conv2.w"].shape[0],
        rot_width=net.params["rot.conv1.w"].shape[0],
        head_width=cfg.head_width,
        use_skip=cfg.use_skip,
        rotation_classes=net.rotation_classes,
        dtype=net.dtype,
    )
    for name in fresh.names(DENSITY_PREFIX):
        net.params[name] = fresh.params[name]
    net.params["density.conv2.b"][:] = bias
    net.use_skip = cfg.use_skip
    net.freeze("")
    net.set_trainable(DENSITY_PREFIX, True)
    net.velocity.clear()
    net.version += 1


def _start_network(cfg: RunConfig, stage1_ckpt: Optional[Checkpoint]) -> Network:
    if stage1_ckpt is None:
        if not cfg.allow_random_fen:
            raise MissingCheckpointError(
                "Stage 2 needs a Stage 1 checkpoint; "
                "pass --allow-random-fen to train on a random FEN"
            )
        logger.warning("Training Stage 2 on a randomly initialized FEN")
        return build_network(cfg)
    return stage1_ckpt.to_network()


def resolve_prior(
    cfg: RunConfig, s_images: int, observed_counts: Optional[np.ndarray] = None
) -> Tuple[PriorSpec, CountPrior]:
    spec = cfg.prior_spec(s_images)
    logger.info(
        "Prior: alpha=%.3f lambda=%.6g c_max_cell=%.3f family=%s",
        spec.alpha,
        spec.lam,
        spec.c_max_cell,
        cfg.prior_family,
    )
    return spec, build_prior(cfg.prior_family, spec, observed_counts)


@dataclass
class _HeadFit:
    net: Network
    prior: CountPrior
    spec: PriorSpec
    train: CropPool
    val: CropPool
    labeled: Optional[CropPool]
    plus_plus: bool
    unlabeled_batches: int
    labeled_batches: int
    diagonal: bool
    validate_labeled: bool


def _density_step(
    fit: _HeadFit,
    cfg: RunConfig,
    pool: CropPool,
    idx: np.ndarray,
    target: np.ndarray,
    target_groups: Optional[np.ndarray],
    diagonal: bool,
) -> float:
    net = fit.net
    maps = net.forward_density_from_features(pool.f2[idx], pool.f3[idx])
    cells = density_cells(maps, *cell_grid(cfg, maps.shape[1] * OUTPUT_STRIDE))
    pred_groups = None
    if target_groups is not None and pool.pseudo is not None:
        pred_groups = group_by_percentile(pool.pseudo[idx].reshape(-1), percentile=cfg.percentile)
    loss, grad = batch_loss(
        cells.reshape(-1),
        target,
        cfg,
        pred_groups,
        target_groups,
        diagonal=diagonal,
        scale=fit.spec.c_max_cell,
    )
    upstream = spread_cells(grad.reshape(cells.shape), maps.shape[1], maps.shape[2])
    net.sgd_step(net.backward(upstream), cfg.lr_stage2, cfg.momentum)
    return loss


def _prior_target(
    fit: _HeadFit, cfg: RunConfig, size: int, rng: np.random.Generator
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    target = fit.prior.draw(size, rng)
    groups = group_by_percentile(target, percentile=cfg.percentile) if fit.plus_plus else None
    return target, groups


def validation_loss(fit: _HeadFit, cfg: RunConfig) -> float:
    """Mean batch loss over the validation pool with a fixed prior draw."""
    rng = _rng(cfg, STREAM_STAGE2_VAL)
    losses = []
    for start in range(0, len(fit.val), cfg.batch_size):
        idx = np.arange(start, min(start + cfg.batch_size, len(fit.val)))
        maps = fit.net.forward_density_from_features(fit.val.f2[idx], fit.val.f3[idx])
        pred = density_cells(maps, *cell_grid(cfg, maps.shape[1] * OUTPUT_STRIDE)).reshape(-1)
        if fit.validate_labeled and fit.val.truth is not None:
            loss, _ = batch_loss(
                pred,
                fit.val.truth[idx].reshape(-1),
                cfg,
                diagonal=True,
                scale=fit.spec.c_max_cell,
            )
        else:
            target, groups = _prior_target(fit, cfg, pred.size, rng)
            pred_groups = None
            if groups is not None and fit.val.pseudo is not None:
                pred_groups = group_by_percentile(
                    fit.val.pseudo[idx].reshape(-1), percentile=cfg.percentile
                )
            loss, _ = batch_loss(
                pred, target, cfg, pred_groups, groups, scale=fit.spec.c_max_cell
            )
        losses.append(loss)
    return float(np.mean(losses))


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless shuffled batches; every epoch is a fresh permutation."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def _fit_head(fit: _HeadFit, cfg: RunConfig, stage: str, patience: int) -> Tuple[Network, dict]:
    rng = _rng(cfg, STREAM_STAGE2)
    pattern = ["unlabeled"] * fit.unlabeled_batches + ["labeled"] * fit.labeled_batches
    unlabeled_iter = _batches(len(fit.train), cfg.batch_size, rng)
    labeled_iter = (
        _batches(len(fit.labeled), cfg.batch_size, _rng(cfg, STREAM_LABELED))
        if fit.labeled is not None
        else None
    )
    if fit.unlabeled_batches:
        per_epoch = math.ceil(len(fit.train) / cfg.batch_size)
        steps = math.ceil(per_epoch * len(pattern) / fit.unlabeled_batches)
    else:
        steps = math.ceil(len(fit.labeled) / cfg.batch_size)

    stopper = EarlyStopping(patience, mode="min")
    initial = validation_loss(fit, cfg)
    best = fit.net.copy()
    stopper.step(initial)
    logger.info("%s: initial validation loss %.6f", stage, initial)
    epoch_loss = math.nan
    epoch = 0
    for epoch in range(1, cfg.stage2_epochs + 1):
        losses = []
        for step in range(steps):
            kind = pattern[step % len(pattern)]
            if kind == "unlabeled":
                idx = next(unlabeled_iter)
                side = fit.train.f2.shape[-1] * OUTPUT_STRIDE
                cells = len(idx) * int(np.prod(cell_grid(cfg, side)))
                target, groups = _prior_target(fit, cfg, cells, rng)
                losses.append(_density_step(fit, cfg, fit.train, idx, target, groups, False))
            else:
                idx = next(labeled_iter)
                target = fit.labeled.truth[idx].reshape(-1)
                losses.append(_density_step(fit, cfg, fit.labeled, idx, target, None, fit.diagonal))
        epoch_loss = float(np.mean(losses))
        val = validation_loss(fit, cfg)
        if stopper.step(val):
            best = fit.net.copy()
        logger.info(
            "%s epoch %d: loss=%.6f val=%.6f (no improvement %d/%d)",
            stage,
            epoch,
            epoch_loss,
            val,
            stopper.counter,
            patience,
        )
        if stopper.should_stop:
            break
    history = {
        "epochs": str(epoch),
        "final_loss": repr(epoch_loss),
        "initial_val_loss": repr(initial),
        "best_val_loss": repr(stopper.best),
    }
    return best, history


def _prepare(
    cfg: RunConfig,
    stage1_ckpt: Optional[Checkpoint],
    source: Optional[UnlabeledImageSource],
    log: Optional[FileAccessLog],
    observed_counts: Optional[np.ndarray],
) -> Tuple[Network, PriorSpec, CountPrior, List[GrayImage], np.ndarray, np.ndarray]:
    net = _start_network(cfg, stage1_ckpt)
    source = source or UnlabeledImageSource.from_manifest(cfg.manifest, log)
    images = source.images()
    if not images:
        raise ValueError(f"empty dataset: {cfg.manifest}")
    spec, prior = resolve_prior(cfg, len(images), observed_counts)
    crop = _fit_crop(cfg.stage2_crop, images)
    # start every pixel at the prior mean spread over its cell
    m, n = cell_grid(cfg, crop)
    pixels_per_cell = (crop // OUTPUT_STRIDE // m) * (crop // OUTPUT_STRIDE // n)
    _init_density_head(net, cfg, bias=prior.mean() / max(pixels_per_cell, 1))
    train_idx, val_idx = split_indices(len(images), cfg.val_fraction, _seed(cfg))
    return net, spec, prior, images, train_idx, val_idx


def _finish(
    net: Network, cfg: RunConfig, stage: str, spec: PriorSpec, s_images: int, history: dict
) -> Checkpoint:
    ckpt = Checkpoint.from_network(net, stage, _seed(cfg), cfg.config_hash())
    ckpt.meta.update(history)
    ckpt.meta.update(mode=cfg.mode, s_images=str(s_images), c_max_cell=repr(spec.c_max_cell))
    return ckpt


def train_stage2(
    cfg: RunConfig,
    stage1_ckpt: Optional[Checkpoint],
    source: Optional[UnlabeledImageSource] = None,
    log: Optional[FileAccessLog] = None,
    observed_counts: Optional[np.ndarray] = None,
) -> Checkpoint:
    """Sinkhorn distribution matching of the density head; FEN frozen.

    Reads images only: the crop source has no access to ground truth. In
    ``plus-plus`` mode predictions and prior samples are split into sparse
    and dense groups before matching.
    """
    net, spec, prior, images, train_idx, val_idx = _prepare(
        cfg, stage1_ckpt, source, log, observed_counts
    )
    plus_plus = cfg.mode == "plus-plus"
    fit = _HeadFit(
        net=net,
        prior=prior,
        spec=spec,
        train=build_pool(net, [images[i] for i in train_idx], cfg, with_pseudo=plus_plus),
        val=build_pool(net, [images[i] for i in val_idx], cfg, with_pseudo=plus_plus),
        labeled=None,
        plus_plus=plus_plus,
        unlabeled_batches=1,
        labeled_batches=0,
        diagonal=False,
        validate_labeled=False,
    )
    best, history = _fit_head(fit, cfg, "Stage 2", cfg.stage2_patience)
    return _finish(best, cfg, "stage2", spec, len(images), history)


def choose_labeled(n: int, k: int, cfg: RunConfig) -> np.ndarray:
    """Seeded choice of ``k`` labeled images out of ``n``."""
    k = min(k, n)
    return np.sort(_rng(cfg, STREAM_LABELED, 1).permutation(n)[:k])


def train_semi(
    cfg: RunConfig,
    stage1_ckpt: Optional[Checkpoint],
    labeled_subset: Optional[Sequence[int]] = None,
    source: Optional[LabeledSource] = None,
    log: Optional[FileAccessLog] = None,
) -> Checkpoint:
    """Stage 2 with labeled batches interleaved at ``cfg.ratio`` (unlabeled:labeled).

    A labeled batch matches predicted cells to the true cells of the same
    crops, by Sinkhorn assignment or by fixed position when
    ``diagonal_pairing`` is set. No labeled images means plain Stage 2.
    """
    source = source or LabeledSource.from_manifest(cfg.manifest, log)
    if labeled_subset is None:
        labeled_subset = choose_labeled(len(source), cfg.labeled, cfg)
    labeled_subset = list(labeled_subset)
    unlabeled_batches, labeled_batches = cfg.ratio_parts()
    if not labeled_subset or labeled_batches == 0:
        logger.info("No labeled batches requested; running plain Stage 2")
        return train_stage2(
            cfg.replace(mode="plain"), stage1_ckpt, source=source.unlabeled(), log=log
        )

    net, spec, prior, images, train_idx, val_idx = _prepare(cfg, stage1_ckpt, source, log, None)
    labeled = source.subset(labeled_subset)
    truth = [labeled.density(i) for i in range(len(labeled))]
    fit = _HeadFit(
        net=net,
        prior=prior,
        spec=spec,
        train=build_pool(net, [images[i] for i in train_idx], cfg),
        val=build_pool(net, [images[i] for i in val_idx], cfg),
        labeled=build_pool(net, [images[i] for i in labeled_subset], cfg, truth_maps=truth),
        plus_plus=False,
        unlabeled_batches=unlabeled_batches,
        labeled_batches=labeled_batches,
        diagonal=cfg.diagonal_pairing,
        validate_labeled=False,
    )
    logger.info(
        "Semi-supervised: %d labeled images, ratio %d:%d",
        len(labeled_subset),
        unlabeled_batches,
        labeled_batches,
    )
    best, history = _fit_head(fit, cfg, "Semi", cfg.stage2_patience)
    ckpt = _finish(best, cfg, "semi", spec, len(images), history)
    ckpt.meta["labeled"] = str(len(labeled_subset))
    return ckpt


def train_supervised(
    cfg: RunConfig,
    stage1_ckpt: Optional[Checkpoint],
    source: Optional[LabeledSource] = None,
    log: Optional[FileAccessLog] = None,
) -> Checkpoint:
    """Reference run: per-cell squared error against ground truth on every image."""
    source = source or LabeledSource.from_manifest(cfg.manifest, log)
    net, spec, prior, images, train_idx, val_idx = _prepare(cfg, stage1_ckpt, source, log, None)
    truth = [source.density(i) for i in range(len(images))]
    fit = _HeadFit(
        net=net,
        prior=prior,
        spec=spec,
        train=build_pool(net, [images[i] for i in train_idx], cfg),
        val=build_pool(
            net, [images[i] for i in val_idx], cfg, truth_maps=[truth[i] for i in val_idx]
        ),
        labeled=build_pool(
            net, [images[i] for i in train_idx], cfg, truth_maps=[truth[i] for i in train_idx]
        ),
        plus_plus=False,
        unlabeled_batches=0,
        labeled_batches=1,
        diagonal=True,
        validate_labeled=True,
    )
    best, history = _fit_head(fit, cfg, "Supervised", cfg.stage2_patience)
    return _finish(best, cfg, "supervised", spec, len(images), history)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def predict_counts(net: Network, images: Sequence[GrayImage], crop: int) -> np.ndarray:
    """Full-image counts: the sum of each image's assembled density."""
    return np.array([predict_density(net, img, crop).count for img in images], dtype=float)


def predict_density(net: Network, img: GrayImage, crop: int) -> DensityMap:
    """Density of a whole image at output stride.

    Tile maps of the crop cover are accumulated together with a coverage
    raster; where the border-aligned tiles overlap, the maps are averaged so
    every output pixel contributes once.
    """
    side = crop // OUTPUT_STRIDE
    height, width = img.height // OUTPUT_STRIDE, img.width // OUTPUT_STRIDE
    raster = np.zeros((height, width))
    coverage = np.zeros((height, width))
    tiles = crop_tiles(img.height, img.width, crop)
    crops = [img.crop(top, left, crop) for top, left in tiles]
    for start in range(0, len(crops), FEATURE_CHUNK):
        maps = net.forward_density(crops[start : start + FEATURE_CHUNK])
        for (top, left), tile in zip(tiles[start : start + FEATURE_CHUNK], maps):
            y = min(top // OUTPUT_STRIDE, height - side)
            x = min(left // OUTPUT_STRIDE, width - side)
            raster[y : y + side, x : x + side] += tile
            coverage[y : y + side, x : x + side] += 1
    return DensityMap(np.divide(raster, coverage, out=np.zeros_like(raster), where=coverage > 0))


def _ground_truth(df: pd.DataFrame, manifest: str, log: Optional[FileAccessLog]) -> np.ndarray:
    if "count" in df.columns:
        return df["count"].to_numpy(dtype=float)
    if "density" in df.columns:
        source = LabeledSource(df["image"].tolist(), df["density"].tolist(), log)
        return np.array([source.density(i).count for i in range(len(source))])
    raise ValueError(f"{manifest}: manifest has neither a count nor a density column")


def evaluate(
    cfg: RunConfig,
    ckpt: Checkpoint,
    test_manifest: Optional[str] = None,
    stage1_ckpt: Optional[Checkpoint] = None,
    log: Optional[FileAccessLog] = None,
) -> pd.DataFrame:
    """MAE/MSE of the trained model and the Random, Mean and P_prior baselines."""
    manifest = test_manifest or cfg.test_manifest
    if log is not None:
        log.record("manifest", manifest)
    df = read_manifest(manifest)
    if df.empty:
        raise ValueError(f"{manifest}: no test images")
    gt = _ground_truth(df, manifest, log)
    images = UnlabeledImageSource(df["image"].tolist(), log).images()
    crop = _fit_crop(cfg.stage2_crop, images)

    s_images = int(ckpt.meta.get("s_images", len(images)))
    spec = cfg.prior_spec(s_images)
    rows, cols = cfg.grid_shape()
    cells_per_image = rows * cols * cfg.s_crop

    predictions = {"css": predict_counts(ckpt.to_network(), images, crop)}
    random_net = (stage1_ckpt or ckpt).to_network()
    _init_density_head(random_net, cfg)
    predictions["random"] = predict_counts(random_net, images, crop)
    predictions["mean"] = np.full(len(images), spec.mean() * cells_per_image)
    rng = _rng(cfg, STREAM_BASELINE)
    predictions["p_prior"] = np.array(
        [spec.draw(cells_per_image, rng).sum() for _ in range(len(images))]
    )

    rows = []
    for method, pred in predictions.items():
        mae, mse = mae_mse(pred, gt)
        rows.append(
            {
                "mode": ckpt.meta.get("mode", cfg.mode),
                "method": method,
                "mae": mae,
                "mse": mse,
                "n_images": len(images),
            }
        )
        logger.info("%s: MAE=%.3f MSE=%.3f", method, mae, mse)
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def sweep(
    cfg: RunConfig,
    parameter: str,
    values: Sequence[float],
    stage1_ckpt: Optional[Checkpoint],
    test_manifest: Optional[str] = None,
    train: Optional[Callable[[RunConfig, Optional[Checkpoint]], Checkpoint]] = None,
) -> pd.DataFrame:
    """Retrain Stage 2 once per value of ``parameter`` and report test MAE/MSE."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"parameter must be one of {SWEEP_PARAMETERS}, got {parameter!r}")
    train = train or train_stage2
    rows = []
    for value in values:
        run_cfg = cfg.replace(**{parameter: float(value)})
        logger.info("Sweep %s=%g", parameter, value)
        ckpt = train(run_cfg, stage1_ckpt)
        report = evaluate(run_cfg, ckpt, test_manifest, stage1_ckpt)
        css = report[report["method"] == "css"].iloc[0]
        rows.append(
            {"parameter": parameter, "value": float(value), "mae": css["mae"], "mse": css["mse"]}
        )
    return pd.DataFrame(rows, columns=["parameter", "value", "mae", "mse"])

from unittest.mock import patch

import numpy as np
import pytest

from selfcount.data.loader import FileAccessLog, LabeledSource, UnlabeledImageSource
from selfcount.domain.grid import DensityMap
from selfcount.models.checkpoint import encode
from selfcount.models.net import FEN_PREFIX, Network, parameter_digest
from selfcount.models.pipeline import (
    REPORT_COLUMNS,
    EarlyStopping,
    MissingCheckpointError,
    batch_loss,
    cell_grid,
    choose_labeled,
    crop_cells,
    density_cells,
    evaluate,
    predict_counts,
    predict_density,
    rotation_crops,
    split_indices,
    spread_cells,
    sweep,
    train_semi,
    train_stage1,
    train_stage2,
    train_supervised,
)
from selfcount.processing.vision import GrayImage


@pytest.fixture
def stage1(tiny_dataset):
    cfg, _ = tiny_dataset
    return train_stage1(cfg)


@pytest.fixture
def stage2(tiny_dataset, stage1):
    cfg, _ = tiny_dataset
    return train_stage2(cfg, stage1)


class TestEarlyStopping:
    def test_zero_patience_stops_after_first_value(self):
        stopper = EarlyStopping(0)
        assert stopper.step(1.0)
        assert stopper.should_stop

    def test_counts_epochs_without_improvement(self):
        stopper = EarlyStopping(2)
        for value in (3.0, 2.0, 2.5, 2.0):
            stopper.step(value)
        assert stopper.best == 2.0
        assert stopper.counter == 2
        assert stopper.should_stop

    def test_max_mode_and_validation(self):
        stopper = EarlyStopping(1, mode="max")
        stopper.step(0.5)
        assert stopper.step(0.7)
        assert not stopper.should_stop
        with pytest.raises(ValueError):
            EarlyStopping(-1)
        with pytest.raises(ValueError):
            EarlyStopping(1, mode="median")


def test_split_indices_partition_and_repeat():
    train, val = split_indices(20, 0.25, seed=3)
    assert len(val) == 5
    assert sorted(np.concatenate([train, val]).tolist()) == list(range(20))
    again = split_indices(20, 0.25, seed=3)
    np.testing.assert_array_equal(val, again[1])
    np.testing.assert_array_equal(split_indices(1, 0.25, seed=3)[1], [0])
    with pytest.raises(ValueError):
        split_indices(0, 0.25, seed=3)


def test_rotation_crops_labels(tiny_dataset, rng):
    cfg, _ = tiny_dataset
    images = UnlabeledImageSource.from_manifest(cfg.manifest).images()
    x, y = rotation_crops(images, 16, 3, 4, rng)
    assert x.shape == (12, 16, 16)
    assert set(y.tolist()) <= {0, 1, 2, 3}
    _, y2 = rotation_crops(images, 16, 3, 2, rng)
    assert set(y2.tolist()) <= {0, 1}


def test_density_cells_and_spread_are_adjoint(rng):
    maps = rng.uniform(0, 1, (2, 7, 8))
    cells = rng.uniform(0, 1, (2, 3, 3))
    lhs = float((density_cells(maps, 3, 3) * cells).sum())
    rhs = float((maps * spread_cells(cells, 7, 8)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)
    assert density_cells(maps, 3, 3).sum() == pytest.approx(maps.sum())


def test_batch_loss_scale_normalizes_costs(tiny_cfg, rng):
    pred = rng.uniform(0, 5, 36)
    target = rng.uniform(0, 5, 36)
    raw_loss, raw_grad = batch_loss(pred / 5, target / 5, tiny_cfg)
    loss, grad = batch_loss(pred, target, tiny_cfg, scale=5.0)
    assert loss == pytest.approx(raw_loss)
    np.testing.assert_allclose(grad, raw_grad / 5.0)


def test_diagonal_loss_gradient(tiny_cfg, rng):
    pred = rng.uniform(0, 5, 9)
    target = rng.uniform(0, 5, 9)
    loss, grad = batch_loss(pred, target, tiny_cfg, diagonal=True, scale=5.0)
    assert loss == pytest.approx(np.mean(((pred - target) / 5) ** 2))
    eps = 1e-6
    bump = np.eye(9)[4] * eps
    numeric = (
        batch_loss(pred + bump, target, tiny_cfg, diagonal=True, scale=5.0)[0]
        - batch_loss(pred - bump, target, tiny_cfg, diagonal=True, scale=5.0)[0]
    ) / (2 * eps)
    assert grad[4] == pytest.approx(numeric, rel=1e-5)


class TestStage1:
    def test_zero_patience_runs_one_epoch(self, tiny_dataset):
        cfg, _ = tiny_dataset
        ckpt = train_stage1(cfg.replace(stage1_patience=0, stage1_epochs=5))
        assert ckpt.stage == "stage1"
        assert ckpt.meta["epochs"] == "1"

    def test_is_deterministic(self, tiny_dataset, stage1):
        cfg, _ = tiny_dataset
        assert encode(train_stage1(cfg)) == encode(stage1)

    def test_reads_images_only(self, tiny_dataset):
        cfg, _ = tiny_dataset
        log = FileAccessLog()
        train_stage1(cfg, log=log)
        assert {kind for kind, _ in log.entries} == {"manifest", "image"}


class TestStage2:
    def test_never_touches_ground_truth(self, tiny_dataset, stage1):
        cfg, _ = tiny_dataset
        log = FileAccessLog()
        ckpt = train_stage2(cfg, stage1, log=log)
        assert log.paths("image")
        assert not log.paths("density")
        assert all("density" not in path for path in log.paths())
        assert ckpt.stage == "stage2"

    def test_keeps_feature_extractor_frozen(self, stage1, stage2):
        before, after = stage1.to_network(), stage2.to_network()
        names = before.names(FEN_PREFIX)
        assert parameter_digest(before, names) == parameter_digest(after, names)
        assert parameter_digest(before, before.names("density.")) != parameter_digest(
            after, after.names("density.")
        )

    def test_requires_stage1_unless_random_fen_allowed(self, tiny_dataset):
        cfg, _ = tiny_dataset
        with pytest.raises(MissingCheckpointError):
            train_stage2(cfg, None)
        ckpt = train_stage2(cfg.replace(allow_random_fen=True, stage2_epochs=1), None)
        assert ckpt.stage == "stage2"

    def test_zero_patience_counts_initial_validation(self, tiny_dataset, stage1):
        cfg, _ = tiny_dataset
        ckpt = train_stage2(cfg.replace(stage2_patience=0, stage2_epochs=5), stage1)
        assert ckpt.meta["epochs"] == "1"
        assert float(ckpt.meta["best_val_loss"]) <= float(ckpt.meta["initial_val_loss"])

    def test_plus_plus_mode(self, tiny_dataset, stage1):
        cfg, _ = tiny_dataset
        ckpt = train_stage2(cfg.replace(mode="plus-plus"), stage1)
        assert ckpt.meta["mode"] == "plus-plus"
        assert np.isfinite(float(ckpt.meta["final_loss"]))

    def test_metadata(self, tiny_dataset, stage2):
        cfg, _ = tiny_dataset
        assert stage2.meta["s_images"] == "4"
        assert float(stage2.meta["c_max_cell"]) == pytest.approx(5.0)
        assert stage2.config_hash == cfg.config_hash()


class TestSemi:
    def test_labeled_only_batches(self, tiny_dataset, stage1):
        cfg, _ = tiny_dataset
        log = FileAccessLog()
        ckpt = train_semi(cfg.replace(ratio="0:1", labeled=2, mode="semi"), stage1, log=log)
        assert ckpt.stage == "semi"
        assert ckpt.meta["labeled"] == "2"
        assert len(log.paths("density")) == 2

    def test_interleaved_with_diagonal_pairing(self, tiny_dataset, stage1):
        cfg, _ = tiny_dataset
        ckpt = train_semi(
            cfg.replace(ratio="2:1", diagonal_pairing=True, mode="semi"), stage1, [0, 1]
        )
        assert ckpt.meta["labeled"] == "2"

    def test_no_labels_falls_back_to_stage2(self, tiny_dataset, stage1):
        cfg, _ = tiny_dataset
        log = FileAccessLog()
        ckpt = train_semi(cfg.replace(labeled=0, mode="semi"), stage1, log=log)
        assert ckpt.stage == "stage2"
        assert not log.paths("density")

    def test_fallback_hands_stage2_images_only(self, tiny_dataset, stage1):
        cfg, _ = tiny_dataset
        received = []

        def fake_stage2(run_cfg, ckpt, source=None, log=None):
            received.append(source)
            return ckpt

        with patch("selfcount.models.pipeline.train_stage2", side_effect=fake_stage2):
            train_semi(cfg.replace(labeled=0, mode="semi"), stage1)
        assert not isinstance(received[0], LabeledSource)
        assert not hasattr(received[0], "density")
        assert len(received[0]) == 4

    def test_choose_labeled_is_seeded(self, tiny_cfg):
        chosen = choose_labeled(10, 3, tiny_cfg)
        assert len(chosen) == 3
        np.testing.assert_array_equal(chosen, choose_labeled(10, 3, tiny_cfg))
        assert len(choose_labeled(2, 5, tiny_cfg)) == 2


def test_cell_size_partition(tiny_cfg):
    cfg = tiny_cfg.replace(cell_size=8)
    assert cell_grid(cfg, 24) == (3, 3)
    assert cell_grid(cfg, 48) == (6, 6)
    assert cell_grid(tiny_cfg, 48) == (3, 3)
    cells = crop_cells(DensityMap(np.ones((24, 24))), cfg)
    np.testing.assert_allclose(cells.counts, np.full((3, 3), 64.0))


def test_cell_size_training_runs(tiny_dataset, stage1):
    cfg, _ = tiny_dataset
    cfg = cfg.replace(cell_size=12, stage2_epochs=1)
    assert train_stage2(cfg, stage1).stage == "stage2"
    assert train_supervised(cfg, stage1).stage == "supervised"


def test_supervised_reference(tiny_dataset, stage1):
    cfg, _ = tiny_dataset
    source = LabeledSource.from_manifest(cfg.manifest)
    ckpt = train_supervised(cfg, stage1, source=source)
    assert ckpt.stage == "supervised"
    assert len(source.log.paths("density")) == 4


class TestEvaluate:
    def test_report_rows(self, tiny_dataset, stage1, stage2):
        cfg, _ = tiny_dataset
        report = evaluate(cfg, stage2, stage1_ckpt=stage1)
        assert list(report.columns) == REPORT_COLUMNS
        assert report["method"].tolist() == ["css", "random", "mean", "p_prior"]
        assert (report["n_images"] == 4).all()
        assert (report["mode"] == "plain").all()
        assert (report[["mae", "mse"]] >= 0).all().all()

    def test_is_deterministic(self, tiny_dataset, stage2):
        cfg, _ = tiny_dataset
        first = evaluate(cfg, stage2)
        second = evaluate(cfg, stage2)
        assert first.equals(second)

    def test_mean_baseline_closed_form(self, tiny_dataset, stage2):
        cfg, manifest = tiny_dataset
        report = evaluate(cfg, stage2)
        constant = cfg.prior_spec(4).mean() * cfg.m * cfg.n * cfg.s_crop
        expected = np.mean(np.abs(constant - manifest["count"].to_numpy()))
        mean_row = report[report["method"] == "mean"].iloc[0]
        assert mean_row["mae"] == pytest.approx(expected, rel=1e-4)

    def test_empty_test_set(self, tiny_dataset, stage2, tmp_path):
        cfg, _ = tiny_dataset
        (tmp_path / "empty.csv").write_text("image,density,count\n")
        with pytest.raises(ValueError):
            evaluate(cfg, stage2, str(tmp_path / "empty.csv"))


def test_predict_density_matches_counts(tiny_dataset, stage2):
    cfg, _ = tiny_dataset
    net = stage2.to_network()
    images = UnlabeledImageSource.from_manifest(cfg.manifest).images()
    density = predict_density(net, images[0], 24)
    assert (density.height, density.width) == (12, 12)
    counts = predict_counts(net, images[:1], 24)
    assert density.count == pytest.approx(counts[0], rel=1e-5)


def test_overlapping_tiles_count_each_pixel_once():
    net = Network.initialize(seed=0, width1=2, width2=2, width3=2, rot_width=2, head_width=2)
    net.params["density.conv2.w"][:] = 0
    net.params["density.conv2.b"][:] = 1
    img = GrayImage(np.full((100, 100), 90, dtype=np.uint8))
    density = predict_density(net, img, 96)
    assert (density.height, density.width) == (25, 25)
    np.testing.assert_allclose(density.values, 1.0)
    assert predict_counts(net, [img], 96)[0] == pytest.approx(625.0)


def test_sweep_single_value(tiny_dataset, stage1, stage2):
    cfg, _ = tiny_dataset
    calls = []

    def fake_train(run_cfg, ckpt):
        calls.append(run_cfg.alpha)
        return stage2

    table = sweep(cfg, "alpha", [2.2], stage1, train=fake_train)
    assert calls == [2.2]
    assert list(table.columns) == ["parameter", "value", "mae", "mse"]
    assert len(table) == 1
    with pytest.raises(ValueError):
        sweep(cfg, "beta", [1.0], stage1)

import os
import sys

import numpy as np
import pytest

# Ensure src is in path
sys.path.append(os.path.join(os.getcwd(), "src"))

from selfcount.config import RunConfig  # noqa: E402
from selfcount.data.synth import SceneSpec, generate_dataset  # noqa: E402
from selfcount.domain.prior import PriorSpec  # noqa: E402


@pytest.fixture(scope="session")
def prior_spec():
    """Default desk-scale prior: C^fmax=720 over 3x3 cells and 4 crops."""
    return PriorSpec.from_crowd(alpha=2.0, c_fmax=720, m=3, n=3, s_crop=4, s_images=300)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg(tmp_path):
    """Run configuration small enough to train in a second or two."""
    return RunConfig(
        manifest=str(tmp_path / "data" / "manifest.csv"),
        test_manifest=str(tmp_path / "data" / "manifest.csv"),
        output_dir=str(tmp_path / "runs"),
        c_fmax=180.0,
        s_images=50,
        width1=4,
        width2=4,
        width3=4,
        rot_width=4,
        head_width=4,
        stage1_crop=24,
        stage1_epochs=2,
        stage1_patience=1,
        stage1_crops_per_image=2,
        stage1_batch_size=4,
        stage2_crop=24,
        stage2_epochs=2,
        stage2_patience=1,
        batch_size=4,
        lr_stage2=1e-2,
        sinkhorn_max_iter=200,
        val_fraction=0.25,
        seed=7,
    )


def tiny_scene_spec(cfg: RunConfig) -> SceneSpec:
    return SceneSpec(
        count_prior=cfg.prior_spec(cfg.s_images),
        crop_size=cfg.stage2_crop,
        crops_per_side=2,
        m=cfg.m,
        n=cfg.n,
        head_radius_range=(1.0, 1.5),
        clutter_level=0.2,
        density_sigma=1.0,
    )


@pytest.fixture
def tiny_dataset(tiny_cfg):
    """Four 48x48 synthetic images written next to ``tiny_cfg.manifest``."""
    out = os.path.dirname(tiny_cfg.manifest)
    manifest = generate_dataset(tiny_scene_spec(tiny_cfg), 4, seed=3, out_dir=out)
    return tiny_cfg, manifest


@pytest.fixture
def tiny_spec(tiny_cfg):
    return tiny_scene_spec(tiny_cfg)

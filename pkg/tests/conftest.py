import numpy as np
import pytest

from backend.services.dataset_service import DatasetService
from shared.models import GenConfig, TrainConfig

# Geometry shared by the small fixtures: 8 lines of 16 points on 32x32 images
SMALL_STAR = dict(num_lines=8, points_per_line=16, radius=14.0)


def signed_weights(rng: np.random.Generator, shape) -> np.ndarray:
    """Random weights with magnitude in [0.5, 1.5], so weighted-sum losses have well-scaled gradients."""
    return rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def disk_mask(shape, center, radius) -> np.ndarray:
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]]
    return (((xs - center[0]) ** 2 + (ys - center[1]) ** 2) <= radius ** 2).astype(np.uint8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_gen_config():
    return GenConfig(height=32, width=32, harmonic_amplitude=0.05, delta=3, **SMALL_STAR)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(
        batch=2,
        iters=2,
        noise_samples=2,
        inner_steps=2,
        delta=2,
        window=3,
        eval_every=1,
        depth=1,
        base_channels=2,
        approx_base_channels=2,
        lr=1e-3,
        **SMALL_STAR,
    )


@pytest.fixture
def tiny_dataset(tmp_path, small_gen_config):
    """Six generated samples (4 train, 2 val) on disk; returns the data directory."""
    data_dir = tmp_path / "data"
    DatasetService(str(data_dir)).generate(seed=7, n_train=4, n_val=2, cfg=small_gen_config, workers=1)
    return data_dir


@pytest.fixture
def tiny_splits(tiny_dataset):
    return DatasetService(str(tiny_dataset)).load_splits()

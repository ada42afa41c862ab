import numpy as np
import pytest

from querytrack.model import ModelConfig
from querytrack.synthetic import SceneConfig, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tiny_config(**overrides):
    """16x16 frames, 8 channels: the smallest config that runs every stage."""
    base = dict(stages=2, frames_per_clip=3, frame_size=16, patch_size=8,
                channels=8, window_radius=1, top_n=2, pool_size=2,
                backbone_depth=1, max_frames=4)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def small_dataset():
    """Four deterministic 96x96 pairs shared across test modules."""
    return generate_dataset(4, clip_len=8, base_seed=11)


@pytest.fixture(scope="session")
def calm_scene():
    """A scene config with no occlusion or motion: target always visible."""
    return SceneConfig(enter_range=(0.0, 0.0), exit_range=(1.0, 1.0),
                       occlusion_prob=0.0, walk_sigma=0.0, shake_sigma=0.0,
                       blur_prob=0.0)

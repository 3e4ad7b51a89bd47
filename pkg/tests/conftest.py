import numpy as np
import pytest

from iatseg.checks import micro_config
from iatseg.data import SceneConfig, generate_dataset, generate_scene


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture
def scene():
    """고정 seed의 64x64 장면 (도형 1~3개)"""
    return generate_scene(3, SceneConfig())


@pytest.fixture
def single_scene():
    return generate_scene(11, SceneConfig(64, 1, 1, 16, 32, 16))


@pytest.fixture
def dataset_dir(tmp_path):
    directory = tmp_path / "data"
    generate_dataset(str(directory), 4, seed=7, cfg=SceneConfig(64, 1, 2, 12, 32, 16))
    return str(directory)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

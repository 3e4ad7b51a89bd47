import json
import os

import numpy as np
import pytest

from iatseg.data import (MANIFEST_NAME, SHAPE_CLASSES, SceneConfig, SceneDataset, downsample_mask,
                         generate_scene, load_scene, read_manifest, rle_decode, rle_encode, save_scene,
                         scene_seed, upsample_mask)
from iatseg.errors import ConfigError, DataError, ShapeError
from iatseg.geometry import mask_to_box


def test_generation_is_deterministic():
    a = generate_scene(42)
    b = generate_scene(42)
    assert np.array_equal(a.image, b.image)
    assert [i.class_id for i in a.instances] == [i.class_id for i in b.instances]
    for x, y in zip(a.instances, b.instances):
        assert np.array_equal(x.mask, y.mask)
    assert not np.array_equal(generate_scene(43).image, a.image)


@pytest.mark.parametrize("seed", range(6))
def test_instances_are_visible_and_boxed(seed):
    cfg = SceneConfig()
    scene = generate_scene(seed, cfg)
    assert scene.image.shape == (3, 64, 64)
    assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
    assert cfg.min_instances <= len(scene.instances) <= cfg.max_instances
    union = np.zeros((64, 64), dtype=np.int64)
    for inst in scene.instances:
        assert inst.area >= cfg.min_visible_px
        assert inst.class_name in SHAPE_CLASSES
        assert inst.box == pytest.approx(np.array(mask_to_box(inst.mask)))
        union += inst.mask
    assert union.max() <= 1


def test_scene_config_validation():
    with pytest.raises(ConfigError):
        SceneConfig(size=48)
    with pytest.raises(ConfigError):
        SceneConfig(min_instances=3, max_instances=2)
    with pytest.raises(ConfigError):
        SceneConfig(min_size_px=40, max_size_px=32)


def test_empty_scene_targets():
    scene = generate_scene(0, SceneConfig(min_instances=0, max_instances=0))
    assert scene.instances == []
    targets = scene.targets()
    assert len(targets) == 0
    assert targets.masks.shape == (0, 8, 8)


def test_targets_live_on_the_mask_grid(scene):
    targets = scene.targets()
    assert targets.masks.shape == (len(scene.instances), 8, 8)
    assert targets.boxes.shape == (len(scene.instances), 4)
    assert np.all(targets.masks.sum(axis=(1, 2)) > 0)


def test_rle_of_a_known_mask():
    mask = np.array([[0, 1, 1], [1, 0, 0]], dtype=np.uint8)
    assert rle_encode(mask) == [1, 3, 2]
    assert np.array_equal(rle_decode([1, 3, 2], 2, 3), mask)
    starts_set = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    assert rle_encode(starts_set) == [0, 2, 2]
    assert np.array_equal(rle_decode([0, 2, 2], 2, 2), starts_set)


@pytest.mark.parametrize("runs", [[1, 2], [3, -1, 4], [7]])
def test_bad_rle_raises_data_error(runs):
    with pytest.raises(DataError):
        rle_decode(runs, 2, 3)


def test_downsample_and_upsample():
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[9, 3] = 1
    small = downsample_mask(mask)
    assert small.tolist() == [[0, 0], [1, 0]]
    big = upsample_mask(small)
    assert big.shape == (16, 16)
    assert big[8:, :8].all() and big.sum() == 64
    assert upsample_mask(np.full((2, 2), 0.4), mode="bilinear") == pytest.approx(np.full((16, 16), 0.4))
    with pytest.raises(ShapeError):
        downsample_mask(np.zeros((12, 16)))
    with pytest.raises(ValueError):
        upsample_mask(small, mode="cubic")


def test_scene_seeds_differ_per_index():
    assert scene_seed(7, 0) != scene_seed(7, 1)
    assert scene_seed(7, 1) == scene_seed(7, 1)


def test_dataset_round_trip(dataset_dir):
    manifest = read_manifest(dataset_dir)
    assert manifest["scenes"] == 4
    assert manifest["classes"] == list(SHAPE_CLASSES)
    assert [e["index"] for e in manifest["entries"]] == [0, 1, 2, 3]
    dataset = SceneDataset(dataset_dir)
    assert len(dataset) == 4 and dataset.size == 64
    scene = dataset[2]
    fresh = generate_scene(scene_seed(7, 2), SceneConfig(64, 1, 2, 12, 32, 16))
    assert np.array_equal(scene.image, fresh.image)
    for loaded, made in zip(scene.instances, fresh.instances):
        assert np.array_equal(loaded.mask, made.mask)
        assert loaded.box == pytest.approx(made.box)
    assert dataset[2] is scene
    with pytest.raises(IndexError):
        dataset[4]


def test_missing_or_broken_scene_raises_data_error(dataset_dir, tmp_path):
    with pytest.raises(DataError):
        load_scene(dataset_dir, 9)
    with pytest.raises(DataError):
        read_manifest(str(tmp_path))

    broken = tmp_path / "broken"
    broken.mkdir()
    _, annotation = save_scene(str(broken), 0, generate_scene(1))
    with open(annotation, "r", encoding="utf-8") as f:
        data = json.load(f)
    data["instances"][0]["class"] = "hexagon"
    with open(annotation, "w", encoding="utf-8") as f:
        json.dump(data, f)
    with pytest.raises(DataError):
        load_scene(str(broken), 0)


def test_manifest_count_mismatch_is_rejected(dataset_dir):
    path = os.path.join(dataset_dir, MANIFEST_NAME)
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    manifest["scenes"] = 5
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f)
    with pytest.raises(DataError):
        SceneDataset(dataset_dir)

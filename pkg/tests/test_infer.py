import os

import numpy as np
import pytest
from PIL import Image

from iatseg.data import SceneConfig, generate_scene
from iatseg.errors import CheckpointError, DataError
from iatseg.evaluate import Prediction
from iatseg.infer import (SIDECAR_NAME, detect, load_image, load_model, mask_to_pgm_array, run_inference,
                          write_instances)
from iatseg.serialize import save_checkpoint, save_tensor
from iatseg.train import Trainer


@pytest.fixture
def checkpoint(micro_cfg, tmp_path):
    scenes = [generate_scene(0, SceneConfig(64, 1, 1, 16, 32, 16))]
    path = str(tmp_path / "model.iatc")
    Trainer(micro_cfg.replace(score_threshold=0.0, top_k=2), scenes).save_checkpoint(path)
    return path


def test_load_image_from_png_and_tensor(scene, tmp_path):
    pixels = np.rint(scene.image * 255).astype(np.uint8).transpose(1, 2, 0)
    png = str(tmp_path / "scene.png")
    Image.fromarray(pixels).save(png)
    loaded = load_image(png)
    assert loaded.shape == (3, 64, 64)
    assert np.allclose(loaded, scene.image, atol=0.5 / 255 + 1e-12)

    raw = str(tmp_path / "scene.iatw")
    save_tensor(raw, scene.image)
    assert np.array_equal(load_image(raw), scene.image)


def test_load_image_rejects_bad_inputs(tmp_path):
    with pytest.raises(DataError):
        load_image(str(tmp_path / "missing.png"))
    odd = str(tmp_path / "odd.png")
    Image.new("RGB", (64, 48)).save(odd)
    with pytest.raises(DataError):
        load_image(odd)
    text = tmp_path / "notes.txt"
    text.write_text("hello", encoding="utf-8")
    with pytest.raises(DataError):
        load_image(str(text))
    gray = str(tmp_path / "gray.iatw")
    save_tensor(gray, np.zeros((1, 64, 64)))
    with pytest.raises(DataError):
        load_image(gray)


def test_load_model_restores_configuration(checkpoint, micro_cfg):
    model, cfg, metadata = load_model(checkpoint)
    assert cfg.d_model == micro_cfg.d_model
    assert cfg.top_k == 2
    assert metadata["step"] == 0
    assert model.num_dyn_params == 65


def test_checkpoint_without_config_is_rejected(tmp_path):
    path = str(tmp_path / "bare.iatc")
    save_checkpoint(path, {"w": np.zeros(2)}, {"step": 0})
    with pytest.raises(CheckpointError):
        load_model(path)


def test_detect_threshold_and_top_k(checkpoint, scene):
    model, _, _ = load_model(checkpoint)
    preds = detect(model, scene.image, 0.0, 1)
    assert len(preds) == 1
    assert preds[0].mask.shape == (8, 8)
    assert 0.0 < preds[0].score < 1.0
    both = detect(model, scene.image, 0.0, 5)
    assert len(both) == 2
    assert both[0].score >= both[1].score
    assert detect(model, scene.image, 1.0, 5) == []


def test_write_instances_names_and_sidecar(tmp_path):
    mask = np.zeros((8, 8))
    mask[2:4, 2:4] = 1.0
    preds = [Prediction(2, 0.75, np.array([0.5, 0.5, 0.25, 0.25]), mask),
             Prediction(0, 0.5, np.array([0.1, 0.2, 0.1, 0.1]), np.zeros((8, 8)))]
    out_dir = str(tmp_path / "out")
    paths = write_instances(out_dir, preds, 64, 64)
    assert [os.path.basename(p) for p in paths] == ["instance_00_triangle.pgm", "instance_01_circle.pgm"]
    with Image.open(paths[0]) as img:
        assert img.size == (64, 64)
        assert np.asarray(img).max() == 255
    with open(os.path.join(out_dir, SIDECAR_NAME), "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert len(lines) == 3
    assert lines[1].split() == ["0", "triangle", "0.750000", "0.500000", "0.500000", "0.250000", "0.250000",
                                "instance_00_triangle.pgm"]


def test_pgm_array_scales_probabilities():
    assert mask_to_pgm_array(np.full((4, 4), 0.5), 4, 4).tolist() == [[128] * 4] * 4


def test_run_inference_end_to_end(checkpoint, scene, tmp_path):
    image = str(tmp_path / "in.iatw")
    save_tensor(image, scene.image)
    out_dir = str(tmp_path / "pred")
    preds = run_inference(checkpoint, image, out_dir)
    assert len(preds) == 2
    assert os.path.exists(os.path.join(out_dir, SIDECAR_NAME))
    assert len([n for n in os.listdir(out_dir) if n.endswith(".pgm")]) == 2

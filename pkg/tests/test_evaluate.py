import numpy as np
import pytest

from iatseg.data import Instance, Scene, SceneConfig, downsample_mask, generate_scene
from iatseg.errors import DataError
from iatseg.evaluate import (Prediction, binarize_mask, evaluate, ground_truth_predictions, interpolated_ap,
                             mask_iou_matrix)
from iatseg.geometry import mask_to_box


def _rect_scene(*rects, class_id=1):
    instances = []
    for y0, y1, x0, x1 in rects:
        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[y0:y1, x0:x1] = 1
        instances.append(Instance(class_id, np.array(mask_to_box(mask)), mask))
    return Scene(np.zeros((3, 64, 64)), instances)


def test_ground_truth_scores_perfect_ap():
    scenes = [generate_scene(s, SceneConfig()) for s in range(3)]
    report = evaluate([ground_truth_predictions(s) for s in scenes], scenes)
    assert report.mask_ap == 1.0
    assert report.box_ap == 1.0
    assert report.mask_ap75 == 1.0
    assert report.num_images == 3
    assert report.num_targets == report.num_predictions
    assert set(report.to_dict()) >= {"mask_ap", "box_ap50", "counts", "per_class"}


def test_half_recall_gives_about_half_ap():
    scene = _rect_scene((0, 16, 0, 16), (32, 48, 32, 48))
    report = evaluate([ground_truth_predictions(scene)[:1]], [scene])
    assert report.mask_ap == pytest.approx(0.5, abs=0.01)
    assert report.mask_ap == pytest.approx(51 / 101)


def test_higher_scored_false_positive_halves_precision():
    scene = _rect_scene((0, 16, 0, 16))
    wrong = np.zeros((64, 64))
    wrong[40:56, 40:56] = 1.0
    preds = ground_truth_predictions(scene, score=0.5)
    preds.append(Prediction(1, 0.9, np.array(mask_to_box(wrong.astype(np.uint8))), wrong))
    assert evaluate([preds], [scene]).mask_ap == pytest.approx(0.5)


def _offset_prediction(scene, index, dy, dx, score):
    mask = np.roll(scene.instances[index].mask, (dy, dx), axis=(0, 1)).astype(np.float64)
    return Prediction(1, score, np.array(mask_to_box(mask.astype(np.uint8))), mask)


def test_prediction_order_does_not_change_the_report():
    scenes = [_rect_scene((0, 16, 0, 16), (32, 56, 24, 48)), _rect_scene((8, 40, 8, 20))]
    first = [_offset_prediction(scenes[0], 0, 0, 0, 0.9), _offset_prediction(scenes[0], 1, 4, 3, 0.6),
             _offset_prediction(scenes[0], 0, 10, 10, 0.75)]
    second = [_offset_prediction(scenes[1], 0, 2, 0, 0.8), _offset_prediction(scenes[1], 0, 20, 30, 0.95)]
    report = evaluate([first, second], scenes).to_dict()
    shuffled = evaluate([first[::-1], [second[1], second[0]]], scenes).to_dict()
    assert report == shuffled
    assert 0.0 < report["mask_ap"] < 1.0


def test_low_resolution_masks_are_upsampled():
    scene = _rect_scene((16, 32, 8, 40))
    coarse = downsample_mask(scene.instances[0].mask).astype(np.float64)
    pred = Prediction(1, 1.0, scene.instances[0].box, coarse)
    assert np.array_equal(binarize_mask(coarse, 64, 64), scene.instances[0].mask.astype(bool))
    assert evaluate([[pred]], [scene]).mask_ap == 1.0


def test_wrong_class_does_not_match():
    scene = _rect_scene((0, 16, 0, 16), class_id=0)
    pred = ground_truth_predictions(scene)[0]
    pred.class_id = 2
    report = evaluate([[pred]], [scene])
    assert report.mask_ap == 0.0
    assert list(report.per_class) == ["circle"]


def test_no_targets_and_length_mismatch():
    empty = Scene(np.zeros((3, 64, 64)), [])
    report = evaluate([[]], [empty])
    assert report.mask_ap == 0.0 and report.box_ap == 0.0
    assert report.num_targets == 0
    with pytest.raises(DataError):
        evaluate([[], []], [empty])


def test_interpolated_ap_values():
    assert interpolated_ap(np.array([1, 1]), 2) == 1.0
    assert interpolated_ap(np.array([]), 3) == 0.0
    assert interpolated_ap(np.array([1]), 0) == 0.0
    assert interpolated_ap(np.array([1, 0, 1]), 2) == pytest.approx((51 * 1.0 + 50 * 2 / 3) / 101)


def test_mask_iou_matrix():
    a = np.zeros((1, 4, 4), dtype=bool)
    a[0, :2] = True
    b = np.zeros((2, 4, 4), dtype=bool)
    b[0, :1] = True
    iou = mask_iou_matrix(a, b)
    assert iou.shape == (1, 2)
    assert iou[0].tolist() == [0.5, 0.0]

import math

import numpy as np
import pytest

from iatseg import ops
from iatseg.errors import ConfigError, DegenerateBoxError, ShapeError
from iatseg.geometry import (box_convert, box_convert_inverse, box_convert_tensor, generalized_iou,
                             generalized_iou_tensor, mask_to_box, normalized_to_grid, pairwise_iou,
                             pixel_centers, resize_bilinear)
from iatseg.gradcheck import check_gradients
from iatseg.posenc import (EncodingConfig, absolute_pe_2d, absolute_pe_array,
                           relative_pe_2d, relative_pe_batch)
from iatseg.tensor import Tensor


def test_box_conversions_are_inverse():
    box = np.array([[0.5, 0.4, 0.2, 0.6]])
    corners = box_convert(box)
    assert np.allclose(corners, [[0.4, 0.1, 0.6, 0.7]])
    assert np.allclose(box_convert_inverse(corners), box)


def test_iou_and_giou_values():
    a = [0.0, 0.0, 2.0, 2.0]
    assert generalized_iou(a, a) == pytest.approx(1.0)
    assert generalized_iou(a, [1.0, 1.0, 3.0, 3.0]) == pytest.approx(1 / 7 - 2 / 9)
    assert generalized_iou(a, [3.0, 0.0, 5.0, 2.0]) == pytest.approx(-0.2)
    iou = pairwise_iou(np.array([a, [0.0, 0.0, 1.0, 1.0]]), np.array([a]))
    assert iou.shape == (2, 1)
    assert iou[1, 0] == pytest.approx(0.25)


def test_giou_of_two_points_is_degenerate():
    with pytest.raises(DegenerateBoxError):
        generalized_iou([0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5])


def test_giou_tensor_matches_numpy_and_has_gradients():
    pred = Tensor(np.array([[0.5, 0.5, 0.3, 0.4], [0.2, 0.3, 0.1, 0.2]]))
    target = box_convert(np.array([[0.45, 0.55, 0.35, 0.36], [0.7, 0.7, 0.2, 0.2]]))
    values = generalized_iou_tensor(box_convert_tensor(pred), target).data
    for i in range(2):
        assert values[i] == pytest.approx(generalized_iou(box_convert(pred.data[i]), target[i]))
    err = check_gradients(lambda: ops.sum(generalized_iou_tensor(box_convert_tensor(pred), target)), [pred])
    assert err < 1e-5


def test_mask_to_box_uses_pixel_extents():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[2:4, 1:7] = 1
    cx, cy, w, h = mask_to_box(mask)
    assert (cx, cy, w, h) == pytest.approx((4 / 8, 3 / 8, 6 / 8, 2 / 8))
    with pytest.raises(ShapeError):
        mask_to_box(np.zeros((4, 4)))


def test_grid_coordinates_put_origin_on_first_center():
    assert normalized_to_grid(np.array([0.5 / 8, 0.5]), 8) == pytest.approx([0.0, 3.5])
    centers = pixel_centers(2, 4)
    assert centers.shape == (8, 2)
    assert centers[0] == pytest.approx([0.125, 0.25])
    assert centers[5] == pytest.approx([0.375, 0.75])


def test_resize_bilinear_keeps_constants_and_block_structure():
    assert np.allclose(resize_bilinear(np.full((4, 4), 0.3), 32, 32), 0.3)
    up = resize_bilinear(np.array([[0.0, 1.0]]), 1, 4)
    assert up == pytest.approx(np.array([[0.0, 0.25, 0.75, 1.0]]))


# --- positional encoding ---

def test_absolute_encoding_layout():
    cfg = EncodingConfig(8)
    pe = absolute_pe_array(3, 5, cfg)
    assert pe.shape == (8, 3, 5)
    xs = np.arange(5.0)
    ys = np.arange(3.0)
    assert np.allclose(pe[0], np.sin(xs)[None, :])
    assert np.allclose(pe[1], np.cos(xs)[None, :])
    assert np.allclose(pe[2], np.sin(xs / 100.0)[None, :])
    assert np.allclose(pe[4], np.sin(ys)[:, None])
    assert np.allclose(pe[7], np.cos(ys / 100.0)[:, None])
    assert np.array_equal(absolute_pe_2d(3, 5, cfg).data, pe)


def _sinusoid_at(pos: float, channel: int, half: int, temperature: float = 10000.0) -> float:
    angle = pos / temperature ** (2 * (channel // 2) / half)
    return math.sin(angle) if channel % 2 == 0 else math.cos(angle)


@pytest.mark.parametrize("center", [(2.3, -0.7), (0.5, 3.25), (-1.9, 4.6)])
def test_relative_encoding_is_shifted_absolute(center):
    cfg = EncodingConfig(16)
    rel = relative_pe_2d(4, 6, center, cfg).data
    for c in range(16):
        for y in range(4):
            for x in range(6):
                if c < 8:
                    expected = _sinusoid_at(x - center[0], c, 8)
                else:
                    expected = _sinusoid_at(y - center[1], c - 8, 8)
                assert abs(rel[c, y, x] - expected) <= 1e-12
    at_zero = relative_pe_2d(4, 6, (0.0, 0.0), cfg).data
    assert np.array_equal(at_zero, absolute_pe_array(4, 6, cfg))
    batch = relative_pe_batch(4, 6, np.array([center, (0.0, 0.0)]), cfg)
    assert batch.shape == (2, 16, 4, 6)
    assert np.allclose(batch[0], rel)


def test_normalized_encoding_scales_to_two_pi():
    cfg = EncodingConfig(4, normalize_to_2pi=True)
    pe = absolute_pe_array(1, 4, cfg)
    assert np.allclose(pe[0, 0], np.sin(np.arange(4) / 4 * 2 * np.pi))


@pytest.mark.parametrize("d_model", [0, 3, 6, 10])
def test_encoding_width_must_split_evenly(d_model):
    with pytest.raises(ConfigError):
        EncodingConfig(d_model)


def test_empty_grid_is_rejected():
    with pytest.raises(ConfigError):
        absolute_pe_array(0, 4, EncodingConfig(4))

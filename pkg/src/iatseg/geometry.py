"""
박스 연산과 샘플링
cxcywh <-> xyxy 변환, IoU/GIoU, bilinear sampling, 마스크 리사이즈
"""

from typing import Sequence, Tuple

import numpy as np

from . import ops
from .errors import DegenerateBoxError, ShapeError
from .tensor import Tensor

# 샘플링 커널은 ops 쪽에 있음 (미분 규칙 포함)
bilinear_sample = ops.bilinear_sample


def box_convert(box: np.ndarray) -> np.ndarray:
    """(cx, cy, w, h) -> (x1, y1, x2, y2) over the last axis."""
    box = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = np.moveaxis(box, -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def box_convert_inverse(box: np.ndarray) -> np.ndarray:
    """(x1, y1, x2, y2) -> (cx, cy, w, h) over the last axis."""
    box = np.asarray(box, dtype=np.float64)
    x1, y1, x2, y2 = np.moveaxis(box, -1, 0)
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def box_area(box: np.ndarray) -> np.ndarray:
    box = np.asarray(box, dtype=np.float64)
    return np.clip(box[..., 2] - box[..., 0], 0, None) * np.clip(box[..., 3] - box[..., 1], 0, None)


def _pairwise_terms(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    inter_w = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    inter_h = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = inter_w * inter_h
    union = box_area(a) + box_area(b) - inter
    hull = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * \
           (np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1]))
    return inter, union, hull


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of corner boxes a [N, 4] against b [G, 4] -> [N, G]."""
    inter, union, _ = _pairwise_terms(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def pairwise_generalized_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU of corner boxes a [N, 4] against b [G, 4] -> [N, G]."""
    inter, union, hull = _pairwise_terms(a, b)
    if np.any(hull <= 0):
        raise DegenerateBoxError("generalized IoU: zero-area enclosing box")
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return iou - (hull - union) / hull


def generalized_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """GIoU of two corner boxes, in [-1, 1]."""
    return float(pairwise_generalized_iou(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


# --- 미분 가능한 박스 연산 (손실용) ---

def box_convert_tensor(box: Tensor) -> Tensor:
    """Differentiable cxcywh -> xyxy for a [n, 4] tensor."""
    if box.ndim != 2 or box.shape[1] != 4:
        raise ShapeError(f"box tensor must be [n, 4], got {box.shape}")
    cx, cy, w, h = (box[:, i] for i in range(4))
    half_w = ops.scale(w, 0.5)
    half_h = ops.scale(h, 0.5)
    return ops.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=1)


def generalized_iou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise GIoU between predicted corner boxes [n, 4] and fixed targets [n, 4] -> [n].

    Where the hull equals the union the enclosing term is dropped, so the
    gradient there is the IoU gradient.
    """
    target = ops.constant(np.asarray(target, dtype=np.float64), like=pred)
    if pred.shape != target.shape:
        raise ShapeError(f"GIoU: prediction {pred.shape} and target {target.shape} differ")
    px1, py1, px2, py2 = (pred[:, i] for i in range(4))
    tx1, ty1, tx2, ty2 = (target[:, i] for i in range(4))

    inter_w = ops.relu(ops.minimum(px2, tx2) - ops.maximum(px1, tx1))
    inter_h = ops.relu(ops.minimum(py2, ty2) - ops.maximum(py1, ty1))
    inter = inter_w * inter_h
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    union = area_p + area_t - inter
    hull = (ops.maximum(px2, tx2) - ops.minimum(px1, tx1)) * \
           (ops.maximum(py2, ty2) - ops.minimum(py1, ty1))
    if np.any(hull.data <= 0):
        raise DegenerateBoxError("generalized IoU: zero-area enclosing box")

    iou = ops.div(inter, union)
    gap = hull - union
    active = ops.constant((gap.data > 0).astype(np.float64), like=pred)
    return iou - ops.div(gap, hull) * active


# --- 마스크 / 좌표 ---

def mask_to_box(mask: np.ndarray) -> np.ndarray:
    """Tight box of a binary [H, W] mask as normalized cxcywh (pixel extents, then normalized)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ShapeError("mask_to_box: empty mask")
    height, width = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x1, x2 = cols[0], cols[-1] + 1
    y1, y2 = rows[0], rows[-1] + 1
    corners = np.array([x1 / width, y1 / height, x2 / width, y2 / height], dtype=np.float64)
    return box_convert_inverse(corners)


def normalized_to_grid(x: np.ndarray, extent: int) -> np.ndarray:
    """Normalized coordinate -> pixel units of a grid (origin at the first cell center)."""
    return np.asarray(x, dtype=np.float64) * extent - 0.5


def pixel_centers(height: int, width: int) -> np.ndarray:
    """Normalized (x, y) of every cell center, row-major -> [H*W, 2]."""
    ys, xs = np.meshgrid((np.arange(height) + 0.5) / height,
                         (np.arange(width) + 0.5) / width, indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)


def resize_bilinear(array: np.ndarray, out_height: int, out_width: int) -> np.ndarray:
    """Bilinear resize of a [H, W] map with cell-center alignment and border clamping."""
    array = np.asarray(array, dtype=np.float64)
    height, width = array.shape

    def _axis(out_n: int, in_n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
        src = np.clip(src, 0.0, in_n - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, in_n - 1)
        return lo, hi, src - lo

    y0, y1, fy = _axis(out_height, height)
    x0, x1, fx = _axis(out_width, width)
    top = array[y0][:, x0] * (1 - fx) + array[y0][:, x1] * fx
    bottom = array[y1][:, x0] * (1 - fx) + array[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]

"""
AP 평가
점수 순 greedy 매칭, 101-point 보간 precision-recall AP, 클래스별 macro 평균
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .data import SHAPE_CLASSES, Scene
from .errors import DataError
from .geometry import box_convert, pairwise_iou, resize_bilinear

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MASK_THRESHOLD = 0.5


@dataclass
class Prediction:
    class_id: int
    score: float
    box: np.ndarray  # [4] normalized cxcywh
    mask: np.ndarray  # probabilities, at the mask-feature grid or at full resolution


@dataclass
class EvalReport:
    mask_ap: float = 0.0
    mask_ap50: float = 0.0
    mask_ap75: float = 0.0
    box_ap: float = 0.0
    box_ap50: float = 0.0
    box_ap75: float = 0.0
    num_images: int = 0
    num_targets: int = 0
    num_predictions: int = 0
    per_class: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            "mask_ap": self.mask_ap, "mask_ap50": self.mask_ap50, "mask_ap75": self.mask_ap75,
            "box_ap": self.box_ap, "box_ap50": self.box_ap50, "box_ap75": self.box_ap75,
            "counts": {"images": self.num_images, "targets": self.num_targets,
                       "predictions": self.num_predictions},
            "per_class": self.per_class,
        }


def binarize_mask(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear upsample to (height, width) if needed, then threshold at 0.5."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (height, width):
        mask = resize_bilinear(mask, height, width)
    return mask >= MASK_THRESHOLD


def mask_iou_matrix(pred_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """IoU of binary masks [P, H, W] against [G, H, W] -> [P, G]."""
    p = pred_masks.reshape(pred_masks.shape[0], -1).astype(np.float64)
    g = gt_masks.reshape(gt_masks.shape[0], -1).astype(np.float64)
    inter = p @ g.T
    union = p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def interpolated_ap(tp: np.ndarray, num_targets: int) -> float:
    """101-point interpolated AP of score-sorted true-positive flags."""
    tp = np.asarray(tp, dtype=np.float64)
    if num_targets <= 0 or tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    recall = tp_cum / num_targets
    precision = tp_cum / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    values = np.where(idx < tp.size, envelope[np.minimum(idx, tp.size - 1)], 0.0)
    return float(values.mean())


@dataclass
class _ImageRecord:
    gt_classes: np.ndarray
    pred_classes: np.ndarray
    scores: np.ndarray
    ious: Dict[str, np.ndarray]


def _image_record(preds: Sequence[Prediction], scene: Scene) -> _ImageRecord:
    h, w = scene.height, scene.width
    gt_classes = np.array([inst.class_id for inst in scene.instances], dtype=np.int64)
    pred_classes = np.array([p.class_id for p in preds], dtype=np.int64)
    scores = np.array([p.score for p in preds], dtype=np.float64)
    n, g = len(preds), len(scene.instances)
    mask_iou = np.zeros((n, g))
    box_iou = np.zeros((n, g))
    if n and g:
        pred_masks = np.stack([binarize_mask(p.mask, h, w) for p in preds])
        gt_masks = np.stack([inst.mask.astype(bool) for inst in scene.instances])
        mask_iou = mask_iou_matrix(pred_masks, gt_masks)
        box_iou = pairwise_iou(box_convert(np.stack([p.box for p in preds])),
                               box_convert(np.stack([inst.box for inst in scene.instances])))
    return _ImageRecord(gt_classes, pred_classes, scores, {"mask": mask_iou, "box": box_iou})


def _class_ap(records: List[_ImageRecord], class_id: int, kind: str, threshold: float) -> float:
    num_targets = sum(int(np.sum(r.gt_classes == class_id)) for r in records)
    candidates = [(-r.scores[p], image, p)
                  for image, r in enumerate(records)
                  for p in np.flatnonzero(r.pred_classes == class_id)]
    candidates.sort()
    matched = [np.zeros(r.gt_classes.shape[0], dtype=bool) for r in records]
    tp = np.zeros(len(candidates))
    for rank, (_, image, p) in enumerate(candidates):
        r = records[image]
        ious = np.where((r.gt_classes == class_id) & ~matched[image], r.ious[kind][p], -1.0)
        if ious.size and ious.max() >= threshold:
            best = int(np.argmax(ious))
            matched[image][best] = True
            tp[rank] = 1.0
    return interpolated_ap(tp, num_targets)


def evaluate(predictions: Sequence[Sequence[Prediction]], scenes: Sequence[Scene],
             thresholds: Sequence[float] = IOU_THRESHOLDS) -> EvalReport:
    """Mask and box AP, macro-averaged over the classes that have targets.

    Predictions of a class are matched in descending score order, ties going
    to the lower (image, index). With no targets at all every AP is 0.
    """
    if len(predictions) != len(scenes):
        raise DataError(f"{len(predictions)} prediction lists for {len(scenes)} scenes")
    records = [_image_record(list(p), s) for p, s in zip(predictions, scenes)]
    present = [c for c in range(len(SHAPE_CLASSES))
               if any(np.any(r.gt_classes == c) for r in records)]
    report = EvalReport(
        num_images=len(scenes),
        num_targets=sum(len(s.instances) for s in scenes),
        num_predictions=sum(len(p) for p in predictions),
    )
    if not present:
        return report

    cache: Dict[tuple, float] = {}

    def ap(kind: str, class_id: int, threshold: float) -> float:
        key = (kind, class_id, round(float(threshold), 4))
        if key not in cache:
            cache[key] = _class_ap(records, class_id, kind, float(threshold))
        return cache[key]

    for kind in ("mask", "box"):
        mean_ap = [float(np.mean([ap(kind, c, t) for t in thresholds])) for c in present]
        setattr(report, f"{kind}_ap", float(np.mean(mean_ap)))
        setattr(report, f"{kind}_ap50", float(np.mean([ap(kind, c, 0.5) for c in present])))
        setattr(report, f"{kind}_ap75", float(np.mean([ap(kind, c, 0.75) for c in present])))
        for c, value in zip(present, mean_ap):
            report.per_class.setdefault(SHAPE_CLASSES[c], {})[f"{kind}_ap"] = value
    return report


def ground_truth_predictions(scene: Scene, score: float = 1.0) -> List[Prediction]:
    """The scene's own instances as full-resolution predictions."""
    return [Prediction(inst.class_id, score, inst.box.copy(), inst.mask.astype(np.float64))
            for inst in scene.instances]

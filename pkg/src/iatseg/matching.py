"""
이분 매칭과 학습 손실
Hungarian 할당, 매칭 비용, focal/L1/GIoU/Dice/BCE 손실과 단계별 합산
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, NonFiniteError, ShapeError
from .geometry import box_convert, box_convert_tensor, generalized_iou_tensor, pairwise_generalized_iou
from .heads import QueryPrediction
from .tensor import Tensor, no_grad

DICE_EPS = 1.0
LOSS_TERMS = ("cls", "l1", "iou", "dice", "bce")


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    iou: float = 2.0
    dice: float = 8.0
    bce: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in LOSS_TERMS:
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight '{name}' must be nonnegative")

    @classmethod
    def from_config(cls, cfg) -> "LossWeights":
        return cls(cfg.cls_weight, cfg.l1_weight, cfg.iou_weight, cfg.dice_weight, cfg.bce_weight,
                   cfg.focal_alpha, cfg.focal_gamma)


@dataclass
class SceneTargets:
    """Ground truth of one scene; masks already on the 1/8 grid."""

    classes: np.ndarray  # [G] int
    boxes: np.ndarray  # [G, 4] normalized cxcywh
    masks: np.ndarray  # [G, h, w] binary

    def __len__(self) -> int:
        return int(self.classes.shape[0])


# --- Hungarian ---

def _solve(cost: np.ndarray):
    """Min-cost assignment of every row of cost [n, m] (n <= m) to a distinct column.

    Shortest augmenting paths with row/column potentials; returns the
    column of each row and the final potentials (1-based, index 0 unused).
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            visited = np.flatnonzero(used)
            u[p[visited]] += delta
            v[visited] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    assignment = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            assignment[p[j] - 1] = j - 1
    return assignment, u, v


def assignment_cost(cost: np.ndarray, assignment: np.ndarray) -> float:
    total = 0.0
    for row, col in enumerate(assignment):
        total += cost[row, col]
    return float(total)


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Optimal matching of G targets to N predictions for a cost matrix [N, G].

    Returns the prediction index of every target. Among optimal
    assignments the lexicographically smallest (target index, prediction
    index) sequence is chosen.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost matrix must be 2-D, got {cost.shape}")
    n_pred, n_tgt = cost.shape
    if n_tgt > n_pred:
        raise ShapeError(f"{n_tgt} targets cannot be matched to {n_pred} predictions")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteError("hungarian")
    if n_tgt == 0:
        return np.zeros(0, dtype=np.int64)

    by_target = cost.T
    columns = list(range(n_pred))
    result = np.zeros(n_tgt, dtype=np.int64)
    for t in range(n_tgt):
        sub = by_target[t:, columns]
        assignment, u, v = _solve(sub)
        optimum = assignment_cost(sub, assignment)
        tol = 1e-9 * max(1.0, abs(optimum))
        reduced = sub[0] - u[1] - v[1:]
        chosen = assignment[0]
        for k in np.flatnonzero(reduced <= tol):
            if k >= chosen:
                break
            rest = [c for c in range(len(columns)) if c != k]
            total = sub[0, k]
            if sub.shape[0] > 1:
                rest_cost = sub[1:][:, rest]
                total += assignment_cost(rest_cost, _solve(rest_cost)[0])
            if total <= optimum + tol:
                chosen = k
                break
        result[t] = columns[chosen]
        del columns[chosen]
    return result


# --- 매칭 비용 ---

def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def matching_cost(class_logits: np.ndarray, boxes: np.ndarray, targets: SceneTargets,
                  weights: LossWeights) -> np.ndarray:
    """[N, G] cost: -lambda_cls * p[class] + lambda_L1 * L1 + lambda_iou * (1 - GIoU)."""
    class_logits = np.asarray(class_logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    if len(targets) == 0:
        return np.zeros((boxes.shape[0], 0))
    prob = _sigmoid(class_logits)
    cost_cls = -prob[:, targets.classes]
    cost_l1 = np.abs(boxes[:, None, :] - targets.boxes[None, :, :]).sum(axis=-1)
    giou = pairwise_generalized_iou(box_convert(boxes), box_convert(targets.boxes))
    return weights.cls * cost_cls + weights.l1 * cost_l1 + weights.iou * (1.0 - giou)


def mask_matching_cost(mask_logits: np.ndarray, target_masks: np.ndarray,
                       weights: LossWeights) -> np.ndarray:
    """Pairwise lambda_dice * dice + lambda_bce * bce between [N, ...] logits and [G, ...] targets."""
    n = mask_logits.shape[0]
    g = target_masks.shape[0]
    logits = np.asarray(mask_logits, dtype=np.float64).reshape(n, -1)
    target = np.asarray(target_masks, dtype=np.float64).reshape(g, -1)
    probs = _sigmoid(logits)
    numerator = 2.0 * probs @ target.T + DICE_EPS
    denominator = probs.sum(axis=1)[:, None] + target.sum(axis=1)[None, :] + DICE_EPS
    dice = 1.0 - numerator / denominator
    softplus = np.logaddexp(0.0, logits)
    bce = (softplus.sum(axis=1)[:, None] - logits @ target.T) / logits.shape[1]
    return weights.dice * dice + weights.bce * bce


# --- 손실 ---

def batched_dice(probs: Tensor, target: np.ndarray) -> Tensor:
    """Per-row dice loss of probs [n, P] against binary target [n, P] -> [n]."""
    if probs.ndim != 2 or probs.shape != tuple(np.shape(target)):
        raise ShapeError(f"dice: prediction {probs.shape} and target {np.shape(target)} differ")
    t = ops.constant(np.asarray(target, dtype=np.float64), like=probs)
    numerator = ops.scale(ops.sum(probs * t, axis=1), 2.0) + DICE_EPS
    denominator = ops.sum(probs, axis=1) + ops.sum(t, axis=1) + DICE_EPS
    return 1.0 - ops.div(numerator, denominator)


def dice_loss(pred_probs: Tensor, target_mask: np.ndarray) -> Tensor:
    """1 - (2 sum(p t) + 1) / (sum p + sum t + 1) over the whole mask."""
    target_mask = np.asarray(target_mask)
    if pred_probs.shape != target_mask.shape:
        raise ShapeError(f"dice: prediction {pred_probs.shape} and target {target_mask.shape} differ")
    flat = ops.reshape(pred_probs, (1, pred_probs.size))
    return ops.sum(batched_dice(flat, target_mask.reshape(1, -1)))


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits."""
    t = ops.constant(np.asarray(target, dtype=np.float64), like=logits)
    if logits.shape != t.shape:
        raise ShapeError(f"bce: logits {logits.shape} and target {t.shape} differ")
    return ops.neg(t * ops.log_sigmoid(logits) + (1.0 - t) * ops.log_sigmoid(ops.neg(logits)))


def _one_hot(target_class, shape) -> np.ndarray:
    labels = np.asarray(target_class, dtype=np.int64).reshape(shape[:-1])
    out = np.zeros(shape)
    valid = labels >= 0
    if labels.ndim == 0:
        if valid:
            out[labels] = 1.0
        return out
    rows = np.flatnonzero(valid)
    out[rows, labels[rows]] = 1.0
    return out


def focal_bce_class_loss(logits: Tensor, target_class, alpha: float = 0.25,
                         gamma: float = 2.0) -> Tensor:
    """Summed sigmoid focal loss.

    target_class gives the class of each row of logits [N, C] (or the single
    class of a [C] vector); -1 marks a row with an all-negative target.
    """
    target = _one_hot(target_class, logits.shape)
    t = ops.constant(target, like=logits)
    p = ops.sigmoid(logits)
    ce = bce_with_logits(logits, target)
    p_t = p * t + (1.0 - p) * (1.0 - t)
    loss = ce * ops.power(1.0 - p_t, gamma)
    if alpha >= 0:
        loss = loss * ops.constant(alpha * target + (1.0 - alpha) * (1.0 - target), like=logits)
    return ops.sum(loss)


@dataclass
class LossResult:
    total: Tensor
    breakdown: Dict[str, float]
    matches: List[np.ndarray] = field(default_factory=list)


MaskFn = Callable[[int, np.ndarray], Tensor]


def total_loss(stage_preds: Sequence[QueryPrediction], targets: SceneTargets, weights: LossWeights,
               mask_stages: int, mask_fn: Optional[MaskFn] = None,
               match_mask_cost: bool = False) -> LossResult:
    """Detection terms on every stage plus mask terms on the last `mask_stages` stages.

    mask_fn(stage, query_indices) returns mask logits [n, h, w] on the grid
    of targets.masks. Every term is normalized by max(G, 1); the breakdown
    holds weighted contributions summed over stages.
    """
    num_stages = len(stage_preds)
    if not 0 <= mask_stages <= num_stages:
        raise ConfigError(f"mask_stages must be in 0..{num_stages}, got {mask_stages}")
    if mask_stages and mask_fn is None:
        raise ConfigError("mask loss requested without a mask predictor")
    g = len(targets)
    norm = float(max(g, 1))
    terms: Dict[str, Optional[Tensor]] = {name: None for name in LOSS_TERMS}
    matches = []

    def accumulate(name: str, value: Tensor, weight: float) -> None:
        contribution = ops.scale(value, weight / norm)
        terms[name] = contribution if terms[name] is None else terms[name] + contribution

    for stage, pred in enumerate(stage_preds):
        with_mask = stage >= num_stages - mask_stages
        cost = matching_cost(pred.class_logits.data, pred.boxes.data, targets, weights)
        if match_mask_cost and with_mask and g:
            with no_grad():
                all_logits = mask_fn(stage, np.arange(pred.boxes.shape[0]))
            cost = cost + mask_matching_cost(all_logits.data, targets.masks, weights)
        pred_idx = hungarian(cost)
        matches.append(pred_idx)

        labels = np.full(pred.class_logits.shape[0], -1, dtype=np.int64)
        labels[pred_idx] = targets.classes
        accumulate("cls", focal_bce_class_loss(pred.class_logits, labels, weights.focal_alpha,
                                               weights.focal_gamma), weights.cls)
        if not g:
            continue

        matched = ops.getitem(pred.boxes, pred_idx)
        target_boxes = ops.constant(targets.boxes, like=matched)
        accumulate("l1", ops.sum(ops.abs(matched - target_boxes)), weights.l1)
        giou = generalized_iou_tensor(box_convert_tensor(matched), box_convert(targets.boxes))
        accumulate("iou", ops.sum(1.0 - giou), weights.iou)

        if with_mask:
            logits = mask_fn(stage, pred_idx)
            if logits.shape != targets.masks.shape:
                raise ShapeError(f"mask logits {logits.shape} do not match targets {targets.masks.shape}")
            flat_logits = ops.reshape(logits, (g, -1))
            flat_targets = targets.masks.reshape(g, -1).astype(np.float64)
            accumulate("dice", ops.sum(batched_dice(ops.sigmoid(flat_logits), flat_targets)), weights.dice)
            accumulate("bce", ops.sum(ops.mean(bce_with_logits(flat_logits, flat_targets), axis=1)),
                       weights.bce)

    total = None
    breakdown = {}
    for name in LOSS_TERMS:
        value = terms[name]
        breakdown[name] = 0.0 if value is None else value.item()
        if value is not None:
            total = value if total is None else total + value
    breakdown["total"] = total.item()
    return LossResult(total, breakdown, matches)

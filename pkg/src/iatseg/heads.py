"""
쿼리별 예측 헤드
클래스, 박스, 동적 마스크 파라미터 브랜치
"""

import math
from dataclasses import dataclass
from typing import List

from . import ops
from .layers import MLP, Linear, ParameterStore
from .tensor import Tensor

FOCAL_PRIOR = 0.01


@dataclass
class QueryPrediction:
    """Outputs of one decoder stage for all N queries."""

    class_logits: Tensor  # [N, num_classes]
    boxes: Tensor  # [N, 4] normalized cxcywh in (0, 1)
    dyn_params: Tensor  # [N, D]


class PredictionHeads:
    def __init__(self, store: ParameterStore, name: str, d_model: int, num_classes: int,
                 num_dyn_params: int, prior: float = FOCAL_PRIOR):
        scope = store.child(name)
        prior_bias = -math.log((1.0 - prior) / prior)
        self.class_proj = Linear(scope, "class", d_model, num_classes, bias_init=prior_bias)
        self.box_mlp = MLP(scope, "box", d_model, d_model, 4, num_layers=3,
                           last_init="zeros", last_bias_init="zeros")
        self.mask_mlp = MLP(scope, "mask", d_model, d_model, num_dyn_params, num_layers=3)

    def class_head(self, q: Tensor) -> Tensor:
        """Raw class logits."""
        return self.class_proj(q)

    def box_head(self, q: Tensor) -> Tensor:
        return ops.sigmoid(self.box_mlp(q))

    def mask_branch(self, q: Tensor) -> Tensor:
        """Unsquashed dynamic parameters."""
        return self.mask_mlp(q)

    def __call__(self, q: Tensor) -> QueryPrediction:
        return QueryPrediction(self.class_head(q), self.box_head(q), self.mask_branch(q))


class StageHeads:
    """Heads for every decoder stage, either one shared set or one set per stage."""

    def __init__(self, store: ParameterStore, num_stages: int, d_model: int, num_classes: int,
                 num_dyn_params: int, shared: bool = True):
        scope = store.child("heads")
        if shared:
            heads = PredictionHeads(scope, "shared", d_model, num_classes, num_dyn_params)
            self.per_stage = [heads] * num_stages
        else:
            self.per_stage = [PredictionHeads(scope, f"stage{i}", d_model, num_classes, num_dyn_params)
                              for i in range(num_stages)]

    def __call__(self, stages: List[Tensor]) -> List[QueryPrediction]:
        return [heads(q) for heads, q in zip(self.per_stage, stages)]

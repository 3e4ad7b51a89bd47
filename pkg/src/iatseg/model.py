"""
전체 네트워크 조립
backbone -> pyramid -> deformable encoder/decoder -> heads, 그리고 mask encoder + instance-aware head
"""

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import ops
from .backbone import PYRAMID_LEVELS, Backbone, FeaturePyramid, PyramidAdapter
from .config import RunConfig
from .deformable import AttentionTrace, DeformableDecoder, DeformableEncoder
from .heads import QueryPrediction, StageHeads
from .iat import InstanceAwareHead, MaskEncoder, MaskFeature, expected_param_count
from .layers import ParameterStore
from .logs import get_logger
from .posenc import EncodingConfig
from .tensor import Tensor

logger = get_logger(__name__)


@dataclass
class ModelOutput:
    stages: List[QueryPrediction]
    mask_feature: MaskFeature
    memory: FeaturePyramid

    @property
    def final(self) -> QueryPrediction:
        return self.stages[-1]


class IatSegModel:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        dtype = np.float32 if cfg.precision == "float32" else np.float64
        self.store = ParameterStore(cfg.seed, dtype)
        self.num_dyn_params = expected_param_count(cfg.mask_channels, cfg.mask_heads, cfg.mask_points)
        pe_cfg = EncodingConfig(cfg.d_model, cfg.pe_temperature, cfg.pe_normalize)
        levels = len(PYRAMID_LEVELS)

        self.backbone = Backbone(self.store, cfg.backbone_channels)
        self.pyramid = PyramidAdapter(self.store, cfg.backbone_channels[2:5], cfg.d_model)
        self.encoder = DeformableEncoder(self.store, cfg.d_model, cfg.ffn_dim, cfg.enc_layers,
                                         cfg.enc_heads, cfg.enc_points, levels, pe_cfg)
        self.decoder = DeformableDecoder(self.store, cfg.d_model, cfg.ffn_dim, cfg.dec_layers,
                                         cfg.num_queries, cfg.dec_heads, cfg.dec_points, levels)
        self.heads = StageHeads(self.store, cfg.dec_layers, cfg.d_model, cfg.num_classes,
                                self.num_dyn_params, shared=cfg.share_stage_heads)
        self.mask_encoder = MaskEncoder(self.store, cfg.d_model, cfg.ffn_dim, cfg.mask_channels,
                                        cfg.mask_encoder_layers, cfg.enc_heads, cfg.enc_points, pe_cfg)
        self.mask_head = InstanceAwareHead(cfg.mask_heads, cfg.mask_points, cfg.pe_mode,
                                           cfg.pe_temperature, cfg.pe_normalize)
        logger.debug(f"model built: {self.store.num_scalars()} parameters, D={self.num_dyn_params}")

    @property
    def dtype(self):
        return self.store.dtype

    def parameters(self) -> Dict[str, Tensor]:
        return self.store.named()

    def as_input(self, image: np.ndarray) -> Tensor:
        return Tensor(np.asarray(image), dtype=self.dtype)

    def __call__(self, image, trace: Optional[AttentionTrace] = None) -> ModelOutput:
        if not isinstance(image, Tensor):
            image = self.as_input(image)
        stages = self.backbone.extract_stages(image)
        pyramid = self.pyramid.build_pyramid(stages)
        memory = self.encoder(pyramid, trace)
        queries = self.decoder(memory.flatten(), memory.shapes, trace)
        predictions = self.heads(queries)
        mask_feature = self.mask_encoder(memory.levels[3], trace)
        return ModelOutput(predictions, mask_feature, memory)

    def mask_logits(self, output: ModelOutput, stage: int, query_indices: np.ndarray,
                    trace: Optional[AttentionTrace] = None,
                    centers: Optional[np.ndarray] = None) -> Tensor:
        """Mask logits [n, H/8, W/8] of the selected queries of one stage.

        The positional-encoding center is the predicted box center, taken as
        a constant; `centers` [n, 2] replaces it when given.
        """
        prediction = output.stages[stage]
        idx = np.asarray(query_indices, dtype=np.int64)
        if centers is None:
            centers = prediction.boxes.data[idx, :2]
        dyn = ops.getitem(prediction.dyn_params, idx)
        return self.mask_head.mask_logits(output.mask_feature, centers, dyn, trace)

    # --- 상태 ---
    def state_dict(self) -> Dict[str, np.ndarray]:
        return self.store.state_dict()

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.store.load_state_dict(state)

    def zero_grad(self) -> None:
        self.store.zero_grad()

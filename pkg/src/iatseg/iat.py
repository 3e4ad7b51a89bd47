"""
Instance-aware transformer
공유 마스크 feature, 동적 파라미터 분해, 인스턴스별 deformable mask 예측
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import ops
from .deformable import AttentionTrace, EncoderLayer, token_positional_encoding, token_reference_points
from .errors import ShapeError
from .layers import LayerNorm, Linear, ParameterStore
from .posenc import EncodingConfig, absolute_pe_array, relative_pe_batch
from .tensor import Tensor

MASK_STRIDE = 8


def expected_param_count(channels: int, heads: int, points: int) -> int:
    """(C*2MK + 2MK) + (C*MK + MK) + (C + 1) == (C + 1)(3MK + 1)"""
    if heads < 1 or points < 1 or channels < 1:
        raise ShapeError("channels, heads and points must be positive")
    if channels % heads:
        raise ShapeError(f"mask channels {channels} are not divisible by {heads} heads")
    mk = heads * points
    return (channels + 1) * (3 * mk + 1)


def layer_shapes(channels: int, heads: int, points: int) -> List[Tuple[str, Tuple[int, ...]]]:
    """Unpack order and shapes of the dynamic layers."""
    mk = heads * points
    return [
        ("offset_weight", (2 * mk, channels)),
        ("offset_bias", (2 * mk,)),
        ("attn_weight", (mk, channels)),
        ("attn_bias", (mk,)),
        ("output_weight", (1, channels)),
        ("output_bias", (1,)),
    ]


@dataclass
class DynamicLayers:
    """Generated linear layers; every field carries an optional leading instance axis."""

    offset_weight: Tensor
    offset_bias: Tensor
    attn_weight: Tensor
    attn_bias: Tensor
    output_weight: Tensor
    output_bias: Tensor

    def parts(self) -> List[Tensor]:
        return [self.offset_weight, self.offset_bias, self.attn_weight,
                self.attn_bias, self.output_weight, self.output_bias]


def unpack_params(vec: Tensor, channels: int, heads: int, points: int) -> DynamicLayers:
    """Split [D] or [n, D] into the three dynamic layers (row-major, fixed order)."""
    expected = expected_param_count(channels, heads, points)
    if vec.ndim not in (1, 2) or vec.shape[-1] != expected:
        raise ShapeError(f"dynamic parameters have shape {vec.shape}, expected [..., {expected}]")
    lead = vec.shape[:-1]
    shapes = layer_shapes(channels, heads, points)
    sizes = [int(np.prod(shape)) for _, shape in shapes]
    pieces = ops.split_sizes(vec, sizes, axis=vec.ndim - 1)
    return DynamicLayers(*[ops.reshape(piece, lead + shape) for piece, (_, shape) in zip(pieces, shapes)])


def flatten_params(layers: DynamicLayers) -> Tensor:
    """Inverse of unpack_params."""
    parts = layers.parts()
    lead = parts[1].shape[:-1]
    flat = [ops.reshape(p, lead + (-1,)) for p in parts]
    return ops.concat(flat, axis=len(lead))


@dataclass
class MaskFeature:
    map: Tensor  # [C_mask, H/8, W/8]
    stride: int = MASK_STRIDE

    @property
    def channels(self) -> int:
        return self.map.shape[0]

    @property
    def grid(self) -> Tuple[int, int]:
        return self.map.shape[1], self.map.shape[2]


class MaskEncoder:
    """Single-level deformable encoder layers over P3, then linear d -> C_mask and layer norm."""

    def __init__(self, store: ParameterStore, d_model: int, ffn_dim: int, mask_channels: int,
                 num_layers: int, heads: int, points: int, pe_cfg: EncodingConfig):
        scope = store.child("mask_encoder")
        self.pe_cfg = pe_cfg
        self.layers = [EncoderLayer(scope, f"layers.{i}", d_model, ffn_dim, heads, points, 1)
                       for i in range(num_layers)]
        self.proj = Linear(scope, "proj", d_model, mask_channels)
        self.norm = LayerNorm(scope, "norm", mask_channels)

    def __call__(self, p3: Tensor, trace: Optional[AttentionTrace] = None) -> MaskFeature:
        if p3.ndim != 3:
            raise ShapeError(f"P3 must be [d, H, W], got {p3.shape}")
        d, h, w = p3.shape
        x = ops.transpose(ops.reshape(p3, (d, h * w)), (1, 0))
        if self.layers:
            shapes = [(h, w)]
            pos = ops.constant(token_positional_encoding(shapes, self.pe_cfg), like=x)
            reference = token_reference_points(shapes)
            for layer in self.layers:
                x = layer(x, pos, reference, shapes, trace)
        x = self.norm(self.proj(x))
        channels = x.shape[1]
        return MaskFeature(ops.reshape(ops.transpose(x, (1, 0)), (channels, h, w)))


def mask_encoder(p3: Tensor, encoder: MaskEncoder, trace: Optional[AttentionTrace] = None) -> MaskFeature:
    return encoder(p3, trace)


class InstanceAwareHead:
    """Deformable attention whose three projections are generated per instance.

    Every mask pixel is a query at its own location; values are sampled raw
    from the input (shared mask feature plus positional encoding), with no
    value projection.
    """

    def __init__(self, heads: int, points: int, pe_mode: str = "rel",
                 temperature: float = 10000.0, normalize_to_2pi: bool = False):
        if pe_mode not in ("none", "abs", "rel"):
            raise ValueError(f"unknown pe_mode '{pe_mode}'")
        self.heads = heads
        self.points = points
        self.pe_mode = pe_mode
        self.temperature = temperature
        self.normalize_to_2pi = normalize_to_2pi

    def _encoding(self, fm: MaskFeature, centers: np.ndarray) -> Optional[np.ndarray]:
        """[n, H*W, C] positional encoding, or None."""
        if self.pe_mode == "none":
            return None
        channels = fm.channels
        h, w = fm.grid
        cfg = EncodingConfig(channels, self.temperature, self.normalize_to_2pi)
        n = centers.shape[0]
        if self.pe_mode == "abs":
            pe = np.broadcast_to(absolute_pe_array(h, w, cfg)[None], (n, channels, h, w))
        else:
            grid_centers = np.stack([centers[:, 0] * w - 0.5, centers[:, 1] * h - 0.5], axis=1)
            pe = relative_pe_batch(h, w, grid_centers, cfg)
        return np.ascontiguousarray(pe.reshape(n, channels, h * w).transpose(0, 2, 1))

    def mask_logits(self, fm: MaskFeature, centers: np.ndarray, dyn: Tensor,
                    trace: Optional[AttentionTrace] = None) -> Tensor:
        """Per-instance mask logits [n, H, W].

        centers [n, 2] are normalized box centers (constants); dyn is the raw
        [n, D] parameter tensor from the mask branch.
        """
        channels = fm.channels
        heads, points = self.heads, self.points
        h, w = fm.grid
        hw = h * w
        head_dim = channels // heads if channels % heads == 0 else 0
        if not head_dim:
            raise ShapeError(f"mask channels {channels} are not divisible by {heads} heads")
        if dyn.ndim != 2:
            raise ShapeError(f"dynamic parameters must be [n, D], got {dyn.shape}")
        n = dyn.shape[0]
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
        if centers.shape[0] != n:
            raise ShapeError(f"{centers.shape[0]} centers for {n} parameter vectors")
        layers = unpack_params(dyn, channels, heads, points)

        tokens = ops.transpose(ops.reshape(fm.map, (channels, hw)), (1, 0))
        x = ops.broadcast_to(ops.reshape(tokens, (1, hw, channels)), (n, hw, channels))
        pe = self._encoding(fm, centers)
        if pe is not None:
            x = x + ops.constant(pe, like=fm.map)

        offsets = ops.linear(x, layers.offset_weight, layers.offset_bias)
        offsets = ops.transpose(ops.reshape(offsets, (n, hw, heads, points, 2)), (0, 2, 1, 3, 4))
        logits = ops.reshape(ops.linear(x, layers.attn_weight, layers.attn_bias), (n, hw, heads, points))
        attn = ops.softmax(logits, axis=-1)
        if trace is not None:
            trace.add("instance", attn.data)

        rows, cols = np.divmod(np.arange(hw), w)
        base_x = np.broadcast_to(cols[None, None, :, None], (n, heads, hw, points)).astype(np.float64)
        base_y = np.broadcast_to(rows[None, None, :, None], (n, heads, hw, points)).astype(np.float64)
        xs = ops.constant(base_x, like=fm.map) + offsets[..., 0]
        ys = ops.constant(base_y, like=fm.map) + offsets[..., 1]

        maps = ops.transpose(ops.reshape(x, (n, hw, heads, head_dim)), (0, 2, 3, 1))
        maps = ops.reshape(maps, (n * heads, head_dim, h, w))
        sampled = ops.grouped_bilinear_sample(maps, ops.reshape(xs, (n * heads, hw * points)),
                                              ops.reshape(ys, (n * heads, hw * points)))
        sampled = ops.reshape(sampled, (n, heads, head_dim, hw, points))

        weights = ops.transpose(attn, (0, 2, 1, 3))
        weights = ops.broadcast_to(ops.reshape(weights, (n, heads, 1, hw, points)),
                                   (n, heads, head_dim, hw, points))
        heads_out = ops.sum(sampled * weights, axis=-1)  # [n, M, c, HW]
        features = ops.transpose(ops.reshape(heads_out, (n, channels, hw)), (0, 2, 1))
        out = ops.linear(features, layers.output_weight, layers.output_bias)  # [n, HW, 1]
        return ops.reshape(out, (n, h, w))

    def predict_masks(self, fm: MaskFeature, centers: np.ndarray, dyn: Tensor,
                      trace: Optional[AttentionTrace] = None) -> Tensor:
        return ops.sigmoid(self.mask_logits(fm, centers, dyn, trace))


def predict_mask(fm: MaskFeature, box_center, dyn, pe_mode: str, heads: int, points: int,
                 temperature: float = 10000.0) -> Tensor:
    """Probability mask [H, W] for one instance; dyn is a [D] tensor or DynamicLayers."""
    if isinstance(dyn, DynamicLayers):
        dyn = flatten_params(dyn)
    head = InstanceAwareHead(heads, points, pe_mode, temperature)
    center = np.asarray(box_center, dtype=np.float64).reshape(1, 2)
    probs = head.predict_masks(fm, center, ops.reshape(dyn, (1, dyn.shape[-1])))
    return ops.reshape(probs, fm.grid)

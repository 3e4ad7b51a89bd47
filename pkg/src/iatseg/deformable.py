"""
Deformable attention
다중 스케일 deformable attention과 이를 이용한 encoder/decoder 레이어
"""

import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .backbone import FeaturePyramid
from .errors import ShapeError
from .geometry import pixel_centers
from .layers import FFN, LayerNorm, Linear, ParameterStore
from .posenc import EncodingConfig, absolute_pe_array
from .tensor import Tensor


class AttentionTrace:
    """Collects attention distributions during a forward pass for invariant checks."""

    def __init__(self):
        self.records: List[Tuple[str, np.ndarray]] = []

    def add(self, kind: str, weights: np.ndarray) -> None:
        self.records.append((kind, np.array(weights)))

    def kinds(self) -> List[str]:
        return sorted({kind for kind, _ in self.records})


def grid_offset_bias(heads: int, levels: int, points: int) -> np.ndarray:
    """One direction per head on the unit square, k-th point at distance k+1 -> [M*L*K*2]."""
    angles = np.arange(heads) * (2.0 * math.pi / heads)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    dirs = dirs / np.abs(dirs).max(axis=-1, keepdims=True)
    grid = np.tile(dirs[:, None, None, :], (1, levels, points, 1))
    grid *= (np.arange(points) + 1.0)[None, None, :, None]
    return grid.reshape(-1)


class DeformAttnWeights:
    def __init__(self, store: ParameterStore, name: str, d_model: int, heads: int,
                 points: int, levels: int):
        if heads < 1 or d_model % heads:
            raise ShapeError(f"d_model {d_model} is not divisible by {heads} heads")
        scope = store.child(name)
        self.d_model = d_model
        self.heads = heads
        self.points = points
        self.levels = levels
        self.offset_proj = Linear(scope, "offset_proj", d_model, 2 * heads * levels * points,
                                  init="zeros", bias_init=grid_offset_bias(heads, levels, points))
        self.weight_proj = Linear(scope, "weight_proj", d_model, heads * levels * points, init="zeros")
        self.value_proj = Linear(scope, "value_proj", d_model, d_model)
        self.output_proj = Linear(scope, "output_proj", d_model, d_model)


def _reference_axis(reference: Tensor, axis: int, extent: int, heads: int, points: int) -> Tensor:
    """Normalized reference coordinate -> pixel units of a level, expanded to [M, Q, K]."""
    q = reference.shape[0]
    coord = ops.reshape(reference[:, axis], (1, q, 1))
    coord = ops.broadcast_to(coord, (heads, q, points))
    return ops.scale(coord, float(extent)) - 0.5


def ms_deform_attn(query: Tensor, reference: Union[Tensor, np.ndarray], value_input: Tensor,
                   shapes: Sequence[Tuple[int, int]], w: DeformAttnWeights,
                   trace: Optional[AttentionTrace] = None) -> Tensor:
    """Multi-scale deformable attention.

    query [Q, d] with normalized reference points [Q, 2] (x, y), value_input
    [S, d] holding every level's tokens level-major. Each head samples K
    points per level around the reference scaled to that level's grid; the
    offsets are in pixels of that grid and A is normalized jointly over the
    K*L samples of a head.
    """
    n_query, d = query.shape
    heads, points, levels = w.heads, w.points, w.levels
    if len(shapes) != levels:
        raise ShapeError(f"deformable attention built for {levels} levels, got {len(shapes)}")
    if value_input.ndim != 2 or value_input.shape[1] != d:
        raise ShapeError(f"value tokens {value_input.shape} do not match query width {d}")
    if value_input.shape[0] != sum(h * wd for h, wd in shapes):
        raise ShapeError("value tokens do not cover the level shapes")
    reference = reference if isinstance(reference, Tensor) else ops.constant(reference, like=query)
    if reference.shape != (n_query, 2):
        raise ShapeError(f"reference points must be [{n_query}, 2], got {reference.shape}")
    head_dim = d // heads

    value = w.value_proj(value_input)
    offsets = ops.reshape(w.offset_proj(query), (n_query, heads, levels, points, 2))
    offsets = ops.transpose(offsets, (1, 0, 2, 3, 4))  # [M, Q, L, K, 2]
    logits = ops.reshape(w.weight_proj(query), (n_query, heads, levels * points))
    attn = ops.softmax(logits, axis=-1)
    if trace is not None:
        trace.add("deform", attn.data)
    attn = ops.transpose(ops.reshape(attn, (n_query, heads, levels, points)), (1, 0, 2, 3))  # [M, Q, L, K]

    sizes = [h * wd for h, wd in shapes]
    out = None
    for level, ((height, width), level_value) in enumerate(zip(shapes, ops.split_sizes(value, sizes))):
        maps = ops.reshape(level_value, (height, width, heads, head_dim))
        maps = ops.transpose(maps, (2, 3, 0, 1))  # [M, c, H, W]
        xs = _reference_axis(reference, 0, width, heads, points) + offsets[:, :, level, :, 0]
        ys = _reference_axis(reference, 1, height, heads, points) + offsets[:, :, level, :, 1]
        sampled = ops.grouped_bilinear_sample(maps, ops.reshape(xs, (heads, n_query * points)),
                                              ops.reshape(ys, (heads, n_query * points)))
        sampled = ops.reshape(sampled, (heads, head_dim, n_query, points))
        weights = ops.reshape(attn[:, :, level, :], (heads, 1, n_query, points))
        weights = ops.broadcast_to(weights, (heads, head_dim, n_query, points))
        contribution = ops.sum(sampled * weights, axis=-1)  # [M, c, Q]
        out = contribution if out is None else out + contribution

    out = ops.reshape(ops.transpose(out, (2, 0, 1)), (n_query, d))
    return w.output_proj(out)


# --- self-attention ---

class SelfAttentionWeights:
    def __init__(self, store: ParameterStore, name: str, d_model: int, heads: int):
        if heads < 1 or d_model % heads:
            raise ShapeError(f"d_model {d_model} is not divisible by {heads} heads")
        scope = store.child(name)
        self.heads = heads
        self.q_proj = Linear(scope, "q_proj", d_model, d_model)
        self.k_proj = Linear(scope, "k_proj", d_model, d_model)
        self.v_proj = Linear(scope, "v_proj", d_model, d_model)
        self.out_proj = Linear(scope, "out_proj", d_model, d_model)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return ops.transpose(ops.reshape(x, (n, heads, d // heads)), (1, 0, 2))  # [M, N, c]


def multi_head_self_attention(x: Tensor, w: SelfAttentionWeights, pos: Optional[Tensor] = None,
                              trace: Optional[AttentionTrace] = None) -> Tensor:
    """Scaled dot-product attention over the rows of x [N, d]; pos is added to queries and keys."""
    if x.ndim != 2:
        raise ShapeError(f"self-attention input must be [N, d], got {x.shape}")
    n, d = x.shape
    heads = w.heads
    qk_in = x if pos is None else x + pos
    q = _split_heads(w.q_proj(qk_in), heads)
    k = _split_heads(w.k_proj(qk_in), heads)
    v = _split_heads(w.v_proj(x), heads)
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d // heads))
    attn = ops.softmax(scores, axis=-1)
    if trace is not None:
        trace.add("self", attn.data)
    out = ops.matmul(attn, v)  # [M, N, c]
    out = ops.reshape(ops.transpose(out, (1, 0, 2)), (n, d))
    return w.out_proj(out)


# --- encoder ---

class EncoderLayer:
    """Pre-norm layer: x + attn(LN x), then x + FFN(LN x)."""

    def __init__(self, store: ParameterStore, name: str, d_model: int, ffn_dim: int,
                 heads: int, points: int, levels: int):
        scope = store.child(name)
        self.norm1 = LayerNorm(scope, "norm1", d_model)
        self.attn = DeformAttnWeights(scope, "attn", d_model, heads, points, levels)
        self.norm2 = LayerNorm(scope, "norm2", d_model)
        self.ffn = FFN(scope, "ffn", d_model, ffn_dim)

    def __call__(self, x: Tensor, pos: Tensor, reference: np.ndarray,
                 shapes: Sequence[Tuple[int, int]], trace: Optional[AttentionTrace] = None) -> Tensor:
        h = self.norm1(x)
        x = x + ms_deform_attn(h + pos, reference, h, shapes, self.attn, trace)
        return x + self.ffn(self.norm2(x))


def encoder_layer(memory: Tensor, pos: Tensor, reference: np.ndarray,
                  shapes: Sequence[Tuple[int, int]], layer: EncoderLayer,
                  trace: Optional[AttentionTrace] = None) -> Tensor:
    return layer(memory, pos, reference, shapes, trace)


def token_reference_points(shapes: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Every token's own normalized cell-center location, level-major -> [S, 2]."""
    return np.concatenate([pixel_centers(h, w) for h, w in shapes], axis=0)


def token_positional_encoding(shapes: Sequence[Tuple[int, int]], pe_cfg: EncodingConfig) -> np.ndarray:
    """Absolute sinusoidal encoding of every token, level-major -> [S, d]."""
    parts = []
    for h, w in shapes:
        pe = absolute_pe_array(h, w, pe_cfg)
        parts.append(pe.reshape(pe_cfg.d_model, h * w).T)
    return np.concatenate(parts, axis=0)


class DeformableEncoder:
    def __init__(self, store: ParameterStore, d_model: int, ffn_dim: int, num_layers: int,
                 heads: int, points: int, levels: int, pe_cfg: EncodingConfig):
        scope = store.child("encoder")
        self.pe_cfg = pe_cfg
        self.level_embed = scope.create("level_embed", (levels, d_model), "normal")
        self.layers = [EncoderLayer(scope, f"layers.{i}", d_model, ffn_dim, heads, points, levels)
                       for i in range(num_layers)]

    def level_positions(self, shapes: Sequence[Tuple[int, int]]) -> Tensor:
        """Sinusoidal encoding plus the learned per-level embedding -> [S, d]."""
        d = self.level_embed.shape[1]
        parts = []
        for level, (h, w) in enumerate(shapes):
            embed = ops.reshape(self.level_embed[level], (1, d))
            parts.append(ops.broadcast_to(embed, (h * w, d)))
        pe = ops.constant(token_positional_encoding(shapes, self.pe_cfg), like=self.level_embed)
        return pe + ops.concat(parts, axis=0)

    def __call__(self, pyramid: FeaturePyramid, trace: Optional[AttentionTrace] = None) -> FeaturePyramid:
        if not self.layers:
            return pyramid
        shapes = pyramid.shapes
        x = pyramid.flatten()
        pos = self.level_positions(shapes)
        reference = token_reference_points(shapes)
        for layer in self.layers:
            x = layer(x, pos, reference, shapes, trace)
        return FeaturePyramid.unflatten(x, shapes, sorted(pyramid.levels))


# --- decoder ---

class DecoderLayer:
    """Pre-norm self-attention, deformable cross-attention and FFN, each residual."""

    def __init__(self, store: ParameterStore, name: str, d_model: int, ffn_dim: int,
                 heads: int, points: int, levels: int):
        scope = store.child(name)
        self.norm1 = LayerNorm(scope, "norm1", d_model)
        self.self_attn = SelfAttentionWeights(scope, "self_attn", d_model, heads)
        self.norm2 = LayerNorm(scope, "norm2", d_model)
        self.cross_attn = DeformAttnWeights(scope, "cross_attn", d_model, heads, points, levels)
        self.norm3 = LayerNorm(scope, "norm3", d_model)
        self.ffn = FFN(scope, "ffn", d_model, ffn_dim)

    def __call__(self, x: Tensor, query_pos: Tensor, reference: Tensor, memory: Tensor,
                 shapes: Sequence[Tuple[int, int]], trace: Optional[AttentionTrace] = None) -> Tensor:
        x = x + multi_head_self_attention(self.norm1(x), self.self_attn, query_pos, trace)
        x = x + ms_deform_attn(self.norm2(x) + query_pos, reference, memory, shapes, self.cross_attn, trace)
        return x + self.ffn(self.norm3(x))


class DeformableDecoder:
    """Learned content and positional query embeddings refined by a stack of decoder layers.

    Reference points come once from the positional embeddings through a
    linear map and a sigmoid, and stay fixed across layers.
    """

    def __init__(self, store: ParameterStore, d_model: int, ffn_dim: int, num_layers: int,
                 num_queries: int, heads: int, points: int, levels: int):
        if num_queries < 1:
            raise ShapeError("decoder needs at least one query")
        scope = store.child("decoder")
        self.query_content = scope.create("query_content", (num_queries, d_model), "normal")
        self.query_pos = scope.create("query_pos", (num_queries, d_model), "xavier")
        self.reference_proj = Linear(scope, "reference_proj", d_model, 2)
        self.layers = [DecoderLayer(scope, f"layers.{i}", d_model, ffn_dim, heads, points, levels)
                       for i in range(num_layers)]
        self.final_norm = LayerNorm(scope, "final_norm", d_model)

    def reference_points(self, query_pos: Optional[Tensor] = None) -> Tensor:
        return ops.sigmoid(self.reference_proj(self.query_pos if query_pos is None else query_pos))

    def __call__(self, memory: Tensor, shapes: Sequence[Tuple[int, int]],
                 trace: Optional[AttentionTrace] = None,
                 queries: Optional[Tuple[Tensor, Tensor]] = None) -> List[Tensor]:
        content, query_pos = queries if queries is not None else (self.query_content, self.query_pos)
        reference = self.reference_points(query_pos)
        x = content
        stages = []
        for layer in self.layers:
            x = layer(x, query_pos, reference, memory, shapes, trace)
            stages.append(self.final_norm(x))
        return stages


def decoder_stack(memory: Tensor, shapes: Sequence[Tuple[int, int]], decoder: DeformableDecoder,
                  trace: Optional[AttentionTrace] = None) -> List[Tensor]:
    """Per-stage query states [N, d], one per decoder layer."""
    return decoder(memory, shapes, trace)

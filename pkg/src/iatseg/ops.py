"""
미분 가능한 텐서 연산
각 연산은 forward 결과를 계산하고 backward 규칙을 테이프에 기록
"""

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError
from .tensor import Scalar, Tensor, as_tensor, record_op

TensorLike = Union[Tensor, Scalar]


# --- 내부 헬퍼 ---

def _coerce_pair(a: TensorLike, b: TensorLike, op: str) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a = as_tensor(a, like)
    b = as_tensor(b, like)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ "
                         f"(only scalar-with-tensor broadcasting is allowed)")
    return a, b


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(np.sum(g)).reshape(shape)


# --- elementwise ---

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _coerce_pair(a, b, "add")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return record_op(a.data + b.data, (a, b), backward, "add")


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _coerce_pair(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return record_op(a.data - b.data, (a, b), backward, "sub")


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _coerce_pair(a, b, "mul")

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return record_op(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    """Scalar multiplication."""
    return mul(x, float(factor))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _coerce_pair(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return record_op(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return record_op(-x.data, (x,), lambda g: (-g,), "neg")


def maximum(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _coerce_pair(a, b, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        return _reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)

    return record_op(np.maximum(a.data, b.data), (a, b), backward, "maximum")


def minimum(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise min; ties route the gradient to the first argument."""
    a, b = _coerce_pair(a, b, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        return _reduce_to(g * pick_a, a.shape), _reduce_to(g * ~pick_a, b.shape)

    return record_op(np.minimum(a.data, b.data), (a, b), backward, "minimum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record_op(np.where(mask, x.data, 0.0).astype(x.dtype), (x,),
                     lambda g: (g * mask,), "relu")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    out = -np.logaddexp(0.0, -x.data).astype(x.dtype)
    return record_op(out, (x,), lambda g: (g * _sigmoid(-x.data),), "log_sigmoid")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return record_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return record_op(out, (x,), lambda g: (g / x.data,), "log")


def power(x: Tensor, exponent: float) -> Tensor:
    p = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(x.data, p)

    def backward(g):
        if p == 0.0:
            return (np.zeros_like(g),)
        return (g * p * np.power(x.data, p - 1.0),)

    return record_op(out, (x,), backward, "power")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return record_op(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


# --- 선형대수 ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, or a batched product of two 3-D stacks."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: need two 2-D or two 3-D tensors, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ in {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch sizes differ in {a.shape} @ {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return record_op(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """y = x W^T + b.

    weight [out, in] applies one layer to x [..., in]. weight [n, out, in]
    applies a separate layer per leading index to x [n, P, in], which is how
    per-instance generated layers run in one call.
    """
    if weight.ndim == 2:
        out_dim, in_dim = weight.shape
        if x.shape[-1] != in_dim:
            raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
        if bias is not None and bias.shape != (out_dim,):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = x.data @ weight.data.T
        if bias is not None:
            out = out + bias.data

        def backward(g):
            g2 = g.reshape(-1, out_dim)
            x2 = x.data.reshape(-1, in_dim)
            gx = g @ weight.data
            gw = g2.T @ x2
            gb = g2.sum(axis=0) if bias is not None else None
            return gx, gw, gb

    elif weight.ndim == 3:
        n, out_dim, in_dim = weight.shape
        if x.ndim != 3 or x.shape[0] != n or x.shape[2] != in_dim:
            raise ShapeError(f"linear: input {x.shape} does not match batched weight {weight.shape}")
        if bias is not None and bias.shape != (n, out_dim):
            raise ShapeError(f"linear: bias {bias.shape} does not match batched weight {weight.shape}")
        out = x.data @ np.swapaxes(weight.data, 1, 2)
        if bias is not None:
            out = out + bias.data[:, None, :]

        def backward(g):
            gx = g @ weight.data
            gw = np.swapaxes(g, 1, 2) @ x.data
            gb = g.sum(axis=1) if bias is not None else None
            return gx, gw, gb
    else:
        raise ShapeError(f"linear: weight must be 2-D or 3-D, got {weight.shape}")

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op(out, inputs, backward, "linear")


# --- 정규화 ---

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis."""
    if x.ndim == 0:
        raise ShapeError("softmax: scalar input has no axis")
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise ShapeError("softmax: empty axis")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return record_op(y, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("layer_norm: zero-length normalization axis")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} "
                         f"must match last dimension {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = np.sum(g * xhat, axis=lead)
        gbeta = np.sum(g, axis=lead)
        dxhat = g * gamma.data
        gx = inv_std / n * (n * dxhat
                            - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return record_op(out, (x, gamma, beta), backward, "layer_norm")


# --- 축소 ---

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return record_op(np.asarray(out, dtype=x.dtype), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise ShapeError("mean: empty reduction")
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# --- shape 조작 ---

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: {x.shape} -> {tuple(shape)}: {e}") from None
    return record_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {x.shape}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return record_op(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return record_op(out, (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no tensors")
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack: no tensors")
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack: {e}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record_op(out, tuple(tensors), backward, "stack")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit expansion of size-1 axes; rank must already match."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}")
    expanded = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)

    def backward(g):
        return (np.sum(g, axis=expanded, keepdims=True) if expanded else g,)

    return record_op(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,),
                     backward, "broadcast_to")


def detach(x: Tensor) -> Tensor:
    return x.detach()


# --- 합성곱 ---

def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [C_in, H, W] with kernels [C_out, C_in, kh, kw]."""
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} and kernels {kernels.shape} do not conform")
    c_in, h, w = x.shape
    c_out, _, kh, kw = kernels.shape
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} must be ({c_out},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"conv2d: degenerate output extent {h_out}x{w_out}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :h_out, :w_out]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, h_out * w_out)
    k2 = kernels.data.reshape(c_out, -1)
    out = k2 @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(c_out, h_out, w_out)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gk = (g2 @ cols.T).reshape(kernels.shape)
        gcols = (k2.T @ g2).reshape(c_in, kh, kw, h_out, w_out)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += gcols[:, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w]
        gb = g2.sum(axis=1) if bias is not None else None
        return gx, gk, gb

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return record_op(out, inputs, backward, "conv2d")


# --- bilinear sampling ---

_CORNERS = ((0, 0), (1, 0), (0, 1), (1, 1))


def grouped_bilinear_sample(maps: Tensor, xs: Tensor, ys: Tensor) -> Tensor:
    """Sample maps [G, C, H, W] at per-group points (xs, ys) [G, P] -> [G, C, P].

    Coordinates are pixel units with the origin on the top-left cell
    center. Neighbours outside the map read as zero. Differentiable with
    respect to the map values and both coordinates.
    """
    if maps.ndim != 4:
        raise ShapeError(f"bilinear sample: maps must be [G, C, H, W], got {maps.shape}")
    g_count, channels, height, width = maps.shape
    if xs.shape != ys.shape or xs.ndim != 2 or xs.shape[0] != g_count:
        raise ShapeError(f"bilinear sample: points {xs.shape}/{ys.shape} do not match maps {maps.shape}")
    if height == 0 or width == 0:
        raise ShapeError("bilinear sample: empty map")
    n_points = xs.shape[1]

    x0 = np.floor(xs.data)
    y0 = np.floor(ys.data)
    fx = xs.data - x0
    fy = ys.data - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    flat_maps = maps.data.reshape(g_count, channels, height * width).transpose(0, 2, 1)
    group_idx = np.arange(g_count)[:, None]

    corners = []
    out = np.zeros((g_count, n_points, channels), dtype=maps.dtype)
    for dx, dy in _CORNERS:
        cx = x0 + dx
        cy = y0 + dy
        valid = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
        flat = np.where(valid, cy * width + cx, 0)
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        values = flat_maps[group_idx, flat] * valid[..., None]  # [G, P, C]
        out += values * (wx * wy)[..., None]
        corners.append((dx, dy, flat, valid, wx, wy, values))

    def backward(g):
        gp = g.transpose(0, 2, 1)  # [G, P, C]
        gmap = np.zeros((g_count * height * width, channels), dtype=maps.dtype)
        gx = np.zeros_like(xs.data)
        gy = np.zeros_like(ys.data)
        offsets = (np.arange(g_count) * height * width)[:, None]
        for dx, dy, flat, valid, wx, wy, values in corners:
            weight = (wx * wy * valid)[..., None]
            np.add.at(gmap, (offsets + flat).reshape(-1), (gp * weight).reshape(-1, channels))
            dot = np.sum(gp * values, axis=-1)
            gx += dot * wy * (1.0 if dx else -1.0)
            gy += dot * wx * (1.0 if dy else -1.0)
        gmap = gmap.reshape(g_count, height * width, channels).transpose(0, 2, 1)
        return gmap.reshape(maps.shape), gx, gy

    return record_op(np.ascontiguousarray(out.transpose(0, 2, 1)), (maps, xs, ys),
                     backward, "bilinear_sample")


def bilinear_sample(feature_map: Tensor, points) -> Tensor:
    """Sample a [C, H, W] map at points -> [C, num_points].

    points is a Tensor [P, 2] of (x, y) or a sequence of (x, y) pairs.
    """
    if feature_map.ndim != 3:
        raise ShapeError(f"bilinear_sample: map must be [C, H, W], got {feature_map.shape}")
    if not isinstance(points, Tensor):
        points = Tensor(np.asarray(points, dtype=feature_map.dtype).reshape(-1, 2),
                        dtype=feature_map.dtype)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: points must be [P, 2], got {points.shape}")
    c, h, w = feature_map.shape
    maps = reshape(feature_map, (1, c, h, w))
    xs = reshape(points[:, 0], (1, -1))
    ys = reshape(points[:, 1], (1, -1))
    return reshape(grouped_bilinear_sample(maps, xs, ys), (c, points.shape[0]))


def constant(data, like: Optional[Tensor] = None) -> Tensor:
    """Non-trainable tensor in the dtype of `like`."""
    return as_tensor(np.asarray(data), like)


def zeros(shape: Sequence[int], like: Optional[Tensor] = None) -> Tensor:
    dtype = like.dtype if like is not None else None
    return Tensor(np.zeros(tuple(shape)), dtype=dtype)


def split_sizes(x: Tensor, sizes: Sequence[int], axis: int = 0) -> List[Tensor]:
    """Consecutive slices of the given sizes along an axis."""
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"split_sizes: sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    parts, start = [], 0
    for size in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + size)
        parts.append(getitem(x, tuple(index)))
        start += size
    return parts

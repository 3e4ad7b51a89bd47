"""
파라미터 저장소와 기본 레이어
모든 학습 가능한 텐서는 ParameterStore에 이름으로 등록됨
"""

from collections import OrderedDict
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .errors import CheckpointError, ShapeError
from .tensor import Tensor

Init = Union[str, float, np.ndarray]


def _fans(shape: Tuple[int, ...]) -> Tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


class ParameterStore:
    """Named, ordered registry of trainable tensors.

    child() returns a view that prefixes names; all views share one
    registry and one random generator, so creation order fixes the
    initial weights for a given seed.
    """

    def __init__(self, seed: int = 0, dtype=np.float64, prefix: str = "",
                 _registry: Optional["OrderedDict[str, Tensor]"] = None,
                 _rng: Optional[np.random.Generator] = None):
        self.dtype = np.dtype(dtype)
        self.prefix = prefix
        self.params: "OrderedDict[str, Tensor]" = _registry if _registry is not None else OrderedDict()
        self.rng = _rng if _rng is not None else np.random.default_rng(seed)

    def child(self, name: str) -> "ParameterStore":
        return ParameterStore(dtype=self.dtype, prefix=self._full(name),
                              _registry=self.params, _rng=self.rng)

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def create(self, name: str, shape: Sequence[int], init: Init = "xavier") -> Tensor:
        full = self._full(name)
        if full in self.params:
            raise ValueError(f"parameter '{full}' already exists")
        shape = tuple(int(s) for s in shape)
        if isinstance(init, np.ndarray):
            if init.shape != shape:
                raise ShapeError(f"init for '{full}' has shape {init.shape}, expected {shape}")
            data = init
        elif isinstance(init, (int, float)):
            data = np.full(shape, float(init))
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "xavier":
            fan_in, fan_out = _fans(shape)
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "normal":
            data = self.rng.normal(0.0, 0.02, size=shape)
        else:
            raise ValueError(f"unknown init '{init}'")
        tensor = Tensor(data, requires_grad=True, dtype=self.dtype, name=full)
        self.params[full] = tensor
        return tensor

    # --- 상태 ---
    def named(self) -> Dict[str, Tensor]:
        if not self.prefix:
            return dict(self.params)
        head = self.prefix + "."
        return {k: v for k, v in self.params.items() if k.startswith(head)}

    def num_scalars(self) -> int:
        return sum(p.size for p in self.named().values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            detail = []
            if missing:
                detail.append(f"missing {sorted(missing)[:3]}")
            if extra:
                detail.append(f"unexpected {sorted(extra)[:3]}")
            raise CheckpointError("checkpoint does not match model: " + ", ".join(detail))
        for name, p in self.params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"shape mismatch for '{name}': checkpoint {value.shape}, model {p.shape}")
            p.data = value.astype(self.dtype)


class Linear:
    def __init__(self, store: ParameterStore, name: str, in_dim: int, out_dim: int,
                 bias: bool = True, init: Init = "xavier", bias_init: Init = "zeros"):
        scope = store.child(name)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = scope.create("weight", (out_dim, in_dim), init)
        self.bias = scope.create("bias", (out_dim,), bias_init) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int, eps: float = 1e-5):
        scope = store.child(name)
        self.gamma = scope.create("gamma", (dim,), "ones")
        self.beta = scope.create("beta", (dim,), "zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP:
    """Stack of linear layers with relu between them (none after the last)."""

    def __init__(self, store: ParameterStore, name: str, in_dim: int, hidden: int,
                 out_dim: int, num_layers: int = 3, last_init: Init = "xavier",
                 last_bias_init: Init = "zeros"):
        if num_layers < 1:
            raise ValueError("MLP needs at least one layer")
        scope = store.child(name)
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = []
        for i in range(num_layers):
            last = i == num_layers - 1
            self.layers.append(Linear(scope, f"layers.{i}", dims[i], dims[i + 1],
                                      init=last_init if last else "xavier",
                                      bias_init=last_bias_init if last else "zeros"))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.relu(x)
        return x


class FFN:
    """Position-wise feed-forward block: linear, relu, linear."""

    def __init__(self, store: ParameterStore, name: str, dim: int, hidden: int):
        scope = store.child(name)
        self.linear1 = Linear(scope, "linear1", dim, hidden)
        self.linear2 = Linear(scope, "linear2", hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.linear2(ops.relu(self.linear1(x)))

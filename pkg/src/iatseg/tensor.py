"""
텐서와 계산 테이프
define-by-run 방식의 reverse-mode 자동 미분 코어
"""

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NonFiniteError, ShapeError, TapeError

DEFAULT_DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
Scalar = Union[int, float]


class TapeRecord:
    """테이프에 기록된 연산 하나"""

    __slots__ = ("output", "inputs", "backward", "name")

    def __init__(self, output: "Tensor", inputs: Tuple["Tensor", ...],
                 backward: BackwardFn, name: str):
        self.output = output
        self.inputs = inputs
        self.backward = backward
        self.name = name


class ComputationTape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, so every operation's inputs
    precede it and a reversed walk is a valid topological order. A tape is
    confined to the thread that created it and can be walked once.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self.consumed = False
        self._owner = threading.get_ident()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, output: "Tensor", inputs: Tuple["Tensor", ...],
               backward: BackwardFn, name: str) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        if threading.get_ident() != self._owner:
            raise TapeError("tape used from a thread other than its owner")
        output._node = (self, len(self.records))
        self.records.append(TapeRecord(output, inputs, backward, name))

    def __enter__(self) -> "ComputationTape":
        _state.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _state.stack.pop()


class _ThreadState(threading.local):
    def __init__(self):
        self.stack: List[ComputationTape] = []
        self.default: Optional[ComputationTape] = None
        self.grad_enabled = True


_state = _ThreadState()


def current_tape() -> ComputationTape:
    """현재 스레드의 활성 테이프 (없으면 기본 테이프를 새로 만듦)

    The default tape only empties on backward(). Forward passes that never
    call backward() run under no_grad() or inside a `with ComputationTape()`
    scope; reset_default_tape() drops whatever an unscoped pass left behind.
    """
    if _state.stack:
        return _state.stack[-1]
    if _state.default is None or _state.default.consumed:
        _state.default = ComputationTape()
    return _state.default


def reset_default_tape() -> int:
    """기본 테이프를 버림; 버려진 기록 수를 반환"""
    tape, _state.default = _state.default, None
    if tape is None or tape.consumed:
        return 0
    dropped = len(tape.records)
    tape.consumed = True
    tape.records.clear()
    return dropped


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """블록 안의 연산은 테이프에 기록하지 않음"""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """Dense N-d array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")

    # numpy가 ndarray 연산자를 먼저 가져가지 않도록
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) \
                else DEFAULT_DTYPE
        self.data = np.array(data, dtype=dtype)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(name or "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[Tuple[ComputationTape, int]] = None

    # --- 기본 속성 ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- 연산자 (구현은 ops 모듈) ---
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        from . import ops
        return ops.relu(self)

    def sigmoid(self):
        from . import ops
        return ops.sigmoid(self)

    def exp(self):
        from . import ops
        return ops.exp(self)

    def log(self):
        from . import ops
        return ops.log(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype=dtype)


def record_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn,
              name: str) -> Tensor:
    """연산 결과를 텐서로 감싸고, 필요하면 테이프에 backward 규칙을 기록"""
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(name)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._node = None
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_tape().record(out, tuple(inputs), backward_fn, name)
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad leaf reachable from a scalar loss."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not require grad; nothing to differentiate")

    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    tape, _ = loss._node
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward()")
    if threading.get_ident() != tape._owner:
        raise TapeError("backward() called from a thread other than the tape owner")

    grads: Dict[int, np.ndarray] = {id(loss): seed}
    try:
        for record in reversed(tape.records):
            g = grads.pop(id(record.output), None)
            if g is None:
                continue
            input_grads = record.backward(g)
            for tensor, gi in zip(record.inputs, input_grads):
                if gi is None or not tensor.requires_grad:
                    continue
                if gi.shape != tensor.shape:
                    gi = gi.reshape(tensor.shape)
                node = tensor._node
                if node is None:
                    tensor.grad = gi.copy() if tensor.grad is None else tensor.grad + gi
                elif node[0] is tape:
                    key = id(tensor)
                    grads[key] = gi if key not in grads else grads[key] + gi
    finally:
        tape.consumed = True
        tape.records.clear()

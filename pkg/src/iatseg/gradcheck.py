"""
유한 차분 기울기 검증
central difference 결과와 backward 결과를 비교하는 오라클
"""

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import GradCheckError, ShapeError
from .tensor import ComputationTape, Tensor, backward, no_grad

DEFAULT_STEP = 1e-5


def _relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic))


def _evaluate(f: Callable[[], Tensor]) -> float:
    with no_grad():
        value = f()
    if value.size != 1:
        raise ShapeError(f"gradient check needs a scalar function, got shape {value.shape}")
    return value.item()


def _analytic(f: Callable[[], Tensor], params: Sequence[Tensor]) -> List[np.ndarray]:
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        with ComputationTape():
            loss = f()
            if loss.size != 1:
                raise ShapeError(f"gradient check needs a scalar function, got shape {loss.shape}")
            if loss.requires_grad:
                backward(loss)
        return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def gradient_errors(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = DEFAULT_STEP,
                    coords: Optional[Sequence[Iterable[int]]] = None) -> List[float]:
    """Per-param max relative error between backward() and central differences.

    f takes no arguments and closes over params. coords optionally lists the
    flat indices to perturb for each param (all coordinates by default).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = list(params)
    base = _evaluate(f)
    if _evaluate(f) != base:
        raise GradCheckError("function is not deterministic between evaluations")

    grads = _analytic(f, params)
    errors = []
    for i, (param, grad) in enumerate(zip(params, grads)):
        flat = param.data.reshape(-1)
        flat_grad = grad.reshape(-1)
        indices = range(flat.size) if coords is None else coords[i]
        worst = 0.0
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + h
            plus = _evaluate(f)
            flat[idx] = original - h
            minus = _evaluate(f)
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * h)
            worst = max(worst, _relative_error(float(flat_grad[idx]), numeric))
        errors.append(worst)
    if _evaluate(f) != base:
        raise GradCheckError("function is not deterministic between evaluations")
    return errors


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = DEFAULT_STEP,
                    coords: Optional[Sequence[Iterable[int]]] = None) -> float:
    errors = gradient_errors(f, params, h=h, coords=coords)
    return max(errors) if errors else 0.0


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            h: float = DEFAULT_STEP) -> float:
    """max_i |analytic_i - (f(x+h e_i) - f(x-h e_i)) / 2h| / max(1, |analytic_i|)"""
    return check_gradients(lambda: f(x), [x], h=h)


def sample_coordinates(params: Dict[str, Tensor], per_param: int,
                       rng: np.random.Generator) -> List[List[int]]:
    """각 파라미터에서 검사할 좌표를 무작위로 고름"""
    picks = []
    for tensor in params.values():
        count = min(per_param, tensor.size)
        picks.append(sorted(rng.choice(tensor.size, size=count, replace=False).tolist()))
    return picks


def check_parameters(loss_fn: Callable[[], Tensor], params: Dict[str, Tensor],
                     per_param: int = 3, h: float = DEFAULT_STEP,
                     seed: int = 0) -> Tuple[float, str]:
    """모델 전체 파라미터에 대한 샘플링 기울기 검사 -> (최대 오차, 최악 파라미터 이름)"""
    rng = np.random.default_rng(seed)
    names = list(params)
    coords = sample_coordinates(params, per_param, rng)
    errors = gradient_errors(loss_fn, [params[n] for n in names], h=h, coords=coords)
    worst, worst_name = 0.0, ""
    for name, err in zip(names, errors):
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name

"""
Adam 옵티마이저
전역 gradient-norm clipping, decoupled weight decay, 단계형 lr drop 포함
"""

from typing import Dict, Tuple

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor


class Adam:
    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, grad_clip: float = 1.0,
                 lr_drop_step: int = 0, lr_drop_factor: float = 0.1):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.lr_drop_step = lr_drop_step
        self.lr_drop_factor = lr_drop_factor
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    @classmethod
    def from_config(cls, params: Dict[str, Tensor], cfg) -> "Adam":
        return cls(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                   weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip,
                   lr_drop_step=cfg.lr_drop_step, lr_drop_factor=cfg.lr_drop_factor)

    def lr_at(self, step: int) -> float:
        """Learning rate used by 1-based update `step`; drops after lr_drop_step updates."""
        if self.lr_drop_step and step > self.lr_drop_step:
            return self.lr * self.lr_drop_factor
        return self.lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def step(self) -> float:
        """Apply one update; returns the gradient norm measured before clipping."""
        norm = self.grad_norm()
        scale = 1.0
        if self.grad_clip > 0 and norm > self.grad_clip:
            scale = self.grad_clip / (norm + 1e-12)

        self.t += 1
        lr = self.lr_at(self.t)
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)
        return norm

    # --- 체크포인트 ---
    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for name in self.params:
            state[f"adam.m.{name}"] = self.m[name].copy()
            state[f"adam.v.{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], t: int) -> None:
        for name, p in self.params.items():
            for key, target in ((f"adam.m.{name}", self.m), (f"adam.v.{name}", self.v)):
                if key not in state:
                    raise CheckpointError(f"optimizer state missing '{key}'")
                value = np.asarray(state[key])
                if value.shape != p.shape:
                    raise CheckpointError(f"optimizer state '{key}' has shape {value.shape}, expected {p.shape}")
                target[name] = value.astype(p.data.dtype)
        self.t = int(t)


def split_optimizer_state(tensors: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
    """체크포인트 텐서를 (모델, 옵티마이저) 두 묶음으로 분리"""
    model, optim = {}, {}
    for name, value in tensors.items():
        (optim if name.startswith("adam.") else model)[name] = value
    return model, optim


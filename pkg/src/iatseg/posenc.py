"""
사인파 위치 인코딩
절대(2D) 인코딩과 박스 중심 기준 상대 인코딩
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


@dataclass(frozen=True)
class EncodingConfig:
    d_model: int
    temperature: float = 10000.0
    normalize_to_2pi: bool = False

    def __post_init__(self):
        if self.d_model <= 0 or self.d_model % 2:
            raise ConfigError(f"positional encoding needs an even positive d_model, got {self.d_model}")
        if (self.d_model // 2) % 2:
            raise ConfigError(f"d_model/2 must be even for the 2-D sin/cos split, got d_model={self.d_model}")

    @property
    def half(self) -> int:
        return self.d_model // 2


def _encode_axis(positions: np.ndarray, extent: int, cfg: EncodingConfig) -> np.ndarray:
    """positions [n] -> [d_model/2, n]; channel 2i is sin, 2i+1 is cos."""
    pos = np.asarray(positions, dtype=np.float64)
    if cfg.normalize_to_2pi:
        pos = pos / max(extent, 1) * (2.0 * math.pi)
    i = np.arange(cfg.half // 2, dtype=np.float64)
    freq = cfg.temperature ** (2.0 * i / cfg.half)
    angles = pos[None, :] / freq[:, None]
    out = np.empty((cfg.half, pos.size), dtype=np.float64)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


def encode_positions(xs: np.ndarray, ys: np.ndarray, cfg: EncodingConfig,
                     extent: Tuple[int, int] = (1, 1)) -> np.ndarray:
    """Encoding of the grid spanned by xs [W] and ys [H] -> [d_model, H, W] (x half first).

    extent is (height, width), used only when normalize_to_2pi is set.
    """
    height, width = len(ys), len(xs)
    x_part = _encode_axis(xs, extent[1], cfg)[:, None, :]
    y_part = _encode_axis(ys, extent[0], cfg)[:, :, None]
    return np.concatenate([np.broadcast_to(x_part, (cfg.half, height, width)),
                           np.broadcast_to(y_part, (cfg.half, height, width))], axis=0)


def absolute_pe_array(height: int, width: int, cfg: EncodingConfig) -> np.ndarray:
    if height < 1 or width < 1:
        raise ConfigError(f"positional encoding grid must be at least 1x1, got {height}x{width}")
    return encode_positions(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64),
                            cfg, (height, width))


def relative_pe_array(height: int, width: int, center: Sequence[float], cfg: EncodingConfig) -> np.ndarray:
    if height < 1 or width < 1:
        raise ConfigError(f"positional encoding grid must be at least 1x1, got {height}x{width}")
    cx, cy = float(center[0]), float(center[1])
    return encode_positions(np.arange(width, dtype=np.float64) - cx,
                            np.arange(height, dtype=np.float64) - cy, cfg, (height, width))


def absolute_pe_2d(height: int, width: int, cfg: EncodingConfig) -> Tensor:
    return Tensor(absolute_pe_array(height, width, cfg))


def relative_pe_2d(height: int, width: int, center: Sequence[float], cfg: EncodingConfig) -> Tensor:
    """Encoding of pos - pos_q; center is in grid pixel units and may be fractional."""
    return Tensor(relative_pe_array(height, width, center, cfg))


def relative_pe_batch(height: int, width: int, centers: np.ndarray, cfg: EncodingConfig) -> np.ndarray:
    """centers [n, 2] -> [n, d_model, H, W]"""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    return np.stack([relative_pe_array(height, width, c, cfg) for c in centers]) if len(centers) \
        else np.zeros((0, cfg.d_model, height, width))

"""
Backbone과 피라미드 어댑터
stride-2 3x3 conv 5단으로 C3..C5를 만들고 F3..F6 피라미드를 구성
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

from . import ops
from .errors import ShapeError
from .layers import ParameterStore
from .tensor import Tensor

PYRAMID_LEVELS = (3, 4, 5, 6)
SIZE_MULTIPLE = 64


@dataclass
class FeaturePyramid:
    """Maps keyed by level l, each at stride 2**l with a shared channel count."""

    levels: Dict[int, Tensor]

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[0]

    @property
    def shapes(self) -> List[Tuple[int, int]]:
        return [tuple(self.levels[l].shape[1:]) for l in sorted(self.levels)]

    def flatten(self) -> Tensor:
        """Tokens of every level, level-major and row-major inside a level -> [S, d]."""
        tokens = []
        for level in sorted(self.levels):
            fmap = self.levels[level]
            d, h, w = fmap.shape
            tokens.append(ops.transpose(ops.reshape(fmap, (d, h * w)), (1, 0)))
        return ops.concat(tokens, axis=0)

    @classmethod
    def unflatten(cls, tokens: Tensor, shapes: Sequence[Tuple[int, int]],
                  levels: Sequence[int] = PYRAMID_LEVELS) -> "FeaturePyramid":
        sizes = [h * w for h, w in shapes]
        parts = ops.split_sizes(tokens, sizes, axis=0)
        maps = {}
        for level, (h, w), part in zip(levels, shapes, parts):
            maps[level] = ops.reshape(ops.transpose(part, (1, 0)), (tokens.shape[1], h, w))
        return cls(maps)


def check_input_extent(height: int, width: int) -> None:
    if height <= 0 or width <= 0 or height % SIZE_MULTIPLE or width % SIZE_MULTIPLE:
        raise ShapeError(f"input extent {height}x{width} is not a multiple of {SIZE_MULTIPLE}")


class _Conv:
    def __init__(self, store: ParameterStore, name: str, c_in: int, c_out: int,
                 kernel: int, stride: int, padding: int):
        scope = store.child(name)
        self.kernels = scope.create("kernels", (c_out, c_in, kernel, kernel))
        self.bias = scope.create("bias", (c_out,), "zeros")
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.kernels, self.bias, stride=self.stride, padding=self.padding)


class Backbone:
    """Toy stack of stride-2 3x3 conv + relu stages; stage s has stride 2**s."""

    def __init__(self, store: ParameterStore, channels: Sequence[int], in_channels: int = 3):
        scope = store.child("backbone")
        self.channels = tuple(channels)
        self.stages = []
        c_in = in_channels
        for i, c_out in enumerate(self.channels):
            self.stages.append(_Conv(scope, f"stage{i + 1}", c_in, c_out, 3, 2, 1))
            c_in = c_out

    def extract_stages(self, image: Tensor) -> Dict[int, Tensor]:
        """image [3, H, W] -> {3: C3, 4: C4, 5: C5}"""
        if image.ndim != 3:
            raise ShapeError(f"image must be [C, H, W], got {image.shape}")
        check_input_extent(image.shape[1], image.shape[2])
        x = image
        out = {}
        for i, conv in enumerate(self.stages, start=1):
            x = ops.relu(conv(x))
            if i >= 3:
                out[i] = x
        return out


class PyramidAdapter:
    """1x1 projections of C3..C5 plus a 3x3 stride-2 conv on C5 for the coarsest level."""

    def __init__(self, store: ParameterStore, stage_channels: Sequence[int], d_model: int):
        scope = store.child("pyramid")
        c3, c4, c5 = stage_channels
        self.lateral = {
            3: _Conv(scope, "proj3", c3, d_model, 1, 1, 0),
            4: _Conv(scope, "proj4", c4, d_model, 1, 1, 0),
            5: _Conv(scope, "proj5", c5, d_model, 1, 1, 0),
        }
        self.extra = _Conv(scope, "proj6", c5, d_model, 3, 2, 1)

    def build_pyramid(self, stages: Dict[int, Tensor]) -> FeaturePyramid:
        for level, conv in self.lateral.items():
            if level not in stages or stages[level].shape[0] != conv.kernels.shape[1]:
                got = stages[level].shape if level in stages else None
                raise ShapeError(f"stage C{level} has shape {got}, expected {conv.kernels.shape[1]} channels")
        levels = {level: conv(stages[level]) for level, conv in self.lateral.items()}
        levels[6] = self.extra(stages[5])
        return FeaturePyramid(levels)

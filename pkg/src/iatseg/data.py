"""
합성 장면 데이터
도형(원/사각형/삼각형) 장면 생성, 마스크 RLE, 다운샘플링, 데이터셋 입출력
"""

import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, DataError, ShapeError
from .geometry import mask_to_box, resize_bilinear
from .iat import MASK_STRIDE
from .logs import get_logger
from .matching import SceneTargets
from .serialize import load_tensor, save_tensor
from .utils import create_directory_if_not_exists, scene_filename

logger = get_logger(__name__)

SHAPE_CLASSES = ("circle", "rectangle", "triangle")
PLACEMENT_ATTEMPTS = 20
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
IMAGE_EXT = ".iatw"
ANNOTATION_EXT = ".json"
_SEED_MULTIPLIER = 100003
_MIN_CONTRAST = 64


@dataclass
class Instance:
    class_id: int
    box: np.ndarray  # [4] normalized cxcywh
    mask: np.ndarray  # [H, W] uint8, visible pixels only

    @property
    def class_name(self) -> str:
        return SHAPE_CLASSES[self.class_id]

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class Scene:
    image: np.ndarray  # [3, H, W] float64 in [0, 1]
    instances: List[Instance] = field(default_factory=list)
    seed: int = 0

    @property
    def height(self) -> int:
        return int(self.image.shape[1])

    @property
    def width(self) -> int:
        return int(self.image.shape[2])

    def targets(self, stride: int = MASK_STRIDE) -> SceneTargets:
        """Matching/loss targets with masks on the 1/stride grid."""
        h, w = self.height // stride, self.width // stride
        if not self.instances:
            return SceneTargets(np.zeros(0, dtype=np.int64), np.zeros((0, 4)), np.zeros((0, h, w), dtype=np.uint8))
        return SceneTargets(
            np.array([inst.class_id for inst in self.instances], dtype=np.int64),
            np.stack([inst.box for inst in self.instances]),
            np.stack([downsample_mask(inst.mask, stride) for inst in self.instances]),
        )

    def to_annotation(self) -> Dict[str, Any]:
        return {
            "height": self.height,
            "width": self.width,
            "seed": self.seed,
            "instances": [
                {"class": inst.class_name,
                 "box": [float(v) for v in inst.box],
                 "mask_rle": rle_encode(inst.mask)}
                for inst in self.instances
            ],
        }


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    min_instances: int = 1
    max_instances: int = 3
    min_size_px: int = 10
    max_size_px: int = 32
    min_visible_px: int = 16

    def __post_init__(self):
        if self.size <= 0 or self.size % 64:
            raise ConfigError(f"scene size must be a positive multiple of 64, got {self.size}")
        if not 0 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 0 <= min_instances <= max_instances")
        if not 1 <= self.min_size_px <= self.max_size_px <= self.size:
            raise ConfigError("need 1 <= min_size_px <= max_size_px <= size")

    @classmethod
    def from_run_config(cls, cfg, size: Optional[int] = None) -> "SceneConfig":
        return cls(size or cfg.image_size, cfg.min_instances, cfg.max_instances,
                   cfg.min_size_px, cfg.max_size_px, cfg.min_visible_px)


def scene_seed(seed: int, index: int) -> int:
    """Seed of scene `index` in a dataset generated with `seed`."""
    return (int(seed) * _SEED_MULTIPLIER + int(index)) % (2 ** 32)


# --- 장면 생성 ---

def _draw_shape(class_id: int, rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    size = cfg.size
    w = int(rng.integers(cfg.min_size_px, cfg.max_size_px + 1))
    h = w if SHAPE_CLASSES[class_id] == "circle" else int(rng.integers(cfg.min_size_px, cfg.max_size_px + 1))
    x0 = int(rng.integers(0, size - w + 1))
    y0 = int(rng.integers(0, size - h + 1))
    x1, y1 = x0 + w - 1, y0 + h - 1

    layer = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(layer)
    name = SHAPE_CLASSES[class_id]
    if name == "circle":
        draw.ellipse([x0, y0, x1, y1], fill=255)
    elif name == "rectangle":
        draw.rectangle([x0, y0, x1, y1], fill=255)
    else:
        apex = x0 + int(rng.integers(0, w))
        draw.polygon([(apex, y0), (x0, y1), (x1, y1)], fill=255)
    return np.asarray(layer) > 0


def _shape_color(rng: np.random.Generator, background: np.ndarray) -> Tuple[int, int, int]:
    color = rng.integers(0, 256, size=3)
    if np.abs(color - background).max() < _MIN_CONTRAST:
        color = (background + 128) % 256
    return tuple(int(c) for c in color)


def generate_scene(seed: int, cfg: Optional[SceneConfig] = None) -> Scene:
    """Paint random shapes on a random background; later shapes occlude earlier ones.

    A shape is retried until it keeps at least min_visible_px pixels for
    itself and for every shape already placed; after PLACEMENT_ATTEMPTS it
    is dropped. Boxes come from the visible masks.
    """
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    background = rng.integers(0, 256, size=3)
    count = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    canvas = Image.new("RGB", (cfg.size, cfg.size), tuple(int(c) for c in background))

    masks: List[np.ndarray] = []
    classes: List[int] = []
    for _ in range(count):
        placed = None
        for _attempt in range(PLACEMENT_ATTEMPTS):
            class_id = int(rng.integers(len(SHAPE_CLASSES)))
            shape = _draw_shape(class_id, rng, cfg)
            remaining = [m & ~shape for m in masks]
            if shape.sum() >= cfg.min_visible_px and all(r.sum() >= cfg.min_visible_px for r in remaining):
                placed = (class_id, shape, remaining)
                break
        if placed is None:
            logger.debug(f"scene {seed}: shape dropped after {PLACEMENT_ATTEMPTS} attempts")
            continue
        class_id, shape, remaining = placed
        masks = remaining + [shape]
        classes.append(class_id)
        canvas.paste(_shape_color(rng, background), mask=Image.fromarray(shape.astype(np.uint8) * 255))

    image = np.asarray(canvas, dtype=np.float64).transpose(2, 0, 1) / 255.0
    instances = [Instance(c, mask_to_box(m), m.astype(np.uint8)) for c, m in zip(classes, masks)]
    return Scene(np.ascontiguousarray(image), instances, seed=int(seed))


# --- 마스크 ---

def rle_encode(mask: np.ndarray) -> List[int]:
    """Row-major run lengths, alternating 0s and 1s, starting with the 0 count."""
    flat = np.asarray(mask).astype(bool).reshape(-1)
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = [int(r) for r in np.diff(bounds)]
    return [0] + runs if flat[0] else runs


def rle_decode(runs: Sequence[int], height: int, width: int) -> np.ndarray:
    counts = np.asarray(list(runs), dtype=np.int64)
    if counts.ndim != 1 or np.any(counts < 0):
        raise DataError("mask RLE must be a list of nonnegative integers")
    if int(counts.sum()) != height * width:
        raise DataError(f"mask RLE covers {int(counts.sum())} pixels, expected {height * width}")
    values = (np.arange(counts.size) % 2).astype(np.uint8)
    return np.repeat(values, counts).reshape(height, width)


def downsample_mask(mask: np.ndarray, stride: int = MASK_STRIDE) -> np.ndarray:
    """Block-max pooling of a binary [H, W] mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be [H, W], got {mask.shape}")
    h, w = mask.shape
    if h % stride or w % stride:
        raise ShapeError(f"mask extent {h}x{w} is not divisible by stride {stride}")
    blocks = mask.reshape(h // stride, stride, w // stride, stride)
    return (blocks.max(axis=(1, 3)) > 0).astype(np.uint8)


def upsample_mask(mask: np.ndarray, stride: int = MASK_STRIDE, mode: str = "nearest") -> np.ndarray:
    """Inverse of downsample_mask ("nearest"), or bilinear resampling of probabilities."""
    mask = np.asarray(mask)
    if mode == "nearest":
        return np.repeat(np.repeat(mask, stride, axis=0), stride, axis=1)
    if mode == "bilinear":
        return resize_bilinear(mask, mask.shape[0] * stride, mask.shape[1] * stride)
    raise ValueError(f"unknown upsample mode '{mode}'")


# --- 데이터셋 입출력 ---

def save_scene(directory: str, index: int, scene: Scene) -> Tuple[str, str]:
    image_path = os.path.join(directory, scene_filename(index, IMAGE_EXT))
    annotation_path = os.path.join(directory, scene_filename(index, ANNOTATION_EXT))
    save_tensor(image_path, scene.image)
    with open(annotation_path, "w", encoding="utf-8") as f:
        json.dump(scene.to_annotation(), f, sort_keys=True)
        f.write("\n")
    return image_path, annotation_path


def _class_id(name: str, path: str) -> int:
    if name not in SHAPE_CLASSES:
        raise DataError(f"{path}: unknown class '{name}'")
    return SHAPE_CLASSES.index(name)


def load_scene(directory: str, index: int) -> Scene:
    image_path = os.path.join(directory, scene_filename(index, IMAGE_EXT))
    annotation_path = os.path.join(directory, scene_filename(index, ANNOTATION_EXT))
    if not os.path.exists(image_path) or not os.path.exists(annotation_path):
        raise DataError(f"scene {index} is missing from {directory}")
    image = load_tensor(image_path)
    try:
        with open(annotation_path, "r", encoding="utf-8") as f:
            annotation = json.load(f)
        height, width = int(annotation["height"]), int(annotation["width"])
        instances = []
        for item in annotation["instances"]:
            mask = rle_decode(item["mask_rle"], height, width)
            box = np.asarray(item["box"], dtype=np.float64)
            if box.shape != (4,):
                raise DataError(f"{annotation_path}: box must have 4 values")
            instances.append(Instance(_class_id(item["class"], annotation_path), box, mask))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{annotation_path}: malformed annotation ({e})") from None
    if image.shape != (3, height, width):
        raise DataError(f"{image_path}: image shape {image.shape} does not match annotation {height}x{width}")
    return Scene(image, instances, seed=int(annotation.get("seed", 0)))


def write_scenes(directory: str, seed: int, start: int, stop: int, cfg: SceneConfig) -> List[Dict[str, Any]]:
    """Generate and write scenes [start, stop); returns their manifest entries."""
    create_directory_if_not_exists(directory)
    entries = []
    for index in range(start, stop):
        sseed = scene_seed(seed, index)
        scene = generate_scene(sseed, cfg)
        save_scene(directory, index, scene)
        entries.append({
            "index": index,
            "seed": sseed,
            "instances": len(scene.instances),
            "image": scene_filename(index, IMAGE_EXT),
            "annotation": scene_filename(index, ANNOTATION_EXT),
        })
    return entries


def write_manifest(directory: str, seed: int, cfg: SceneConfig, entries: List[Dict[str, Any]]) -> str:
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": int(seed),
        "size": cfg.size,
        "classes": list(SHAPE_CLASSES),
        "scenes": len(entries),
        "entries": sorted(entries, key=lambda e: e["index"]),
    }
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return path


def read_manifest(directory: str) -> Dict[str, Any]:
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"no {MANIFEST_NAME} in {directory}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except ValueError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {manifest.get('version')}")
    if manifest.get("scenes") != len(manifest.get("entries", [])):
        raise DataError(f"{path}: scene count does not match entries")
    return manifest


def generate_dataset(directory: str, scenes: int, seed: int, cfg: Optional[SceneConfig] = None) -> Dict[str, Any]:
    """Single-threaded generation of a whole split (reference for the threaded manager)."""
    cfg = cfg or SceneConfig()
    entries = write_scenes(directory, seed, 0, scenes, cfg)
    write_manifest(directory, seed, cfg, entries)
    return read_manifest(directory)


class SceneDataset:
    """A generated split on disk."""

    def __init__(self, directory: str):
        self.directory = directory
        self.manifest = read_manifest(directory)
        self._cache: Dict[int, Scene] = {}

    def __len__(self) -> int:
        return int(self.manifest["scenes"])

    @property
    def size(self) -> int:
        return int(self.manifest["size"])

    def __getitem__(self, index: int) -> Scene:
        if not 0 <= index < len(self):
            raise IndexError(f"scene index {index} out of range 0..{len(self) - 1}")
        if index not in self._cache:
            self._cache[index] = load_scene(self.directory, index)
        return self._cache[index]

    def scenes(self) -> List[Scene]:
        return [self[i] for i in range(len(self))]

"""
추론
체크포인트 로드, 최종 decoder 단계의 인스턴스 선택, PGM 마스크 저장
"""

import os
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from . import ops
from .backbone import SIZE_MULTIPLE
from .config import RunConfig, config_from_dict
from .data import SHAPE_CLASSES
from .errors import CheckpointError, DataError
from .evaluate import Prediction
from .geometry import resize_bilinear
from .logs import get_logger
from .model import IatSegModel
from .optim import split_optimizer_state
from .serialize import load_checkpoint, load_tensor
from .tensor import no_grad
from .utils import create_directory_if_not_exists, get_file_extension, is_image_file, sanitize_label

logger = get_logger(__name__)

SIDECAR_NAME = "instances.txt"


def load_model(path: str,
               overrides: Optional[Dict[str, Any]] = None) -> Tuple[IatSegModel, RunConfig, Dict[str, Any]]:
    """체크포인트에 저장된 설정(+ overrides)으로 모델을 다시 만들고 가중치를 로드"""
    tensors, metadata = load_checkpoint(path)
    if "config" not in metadata:
        raise CheckpointError(f"{path}: checkpoint carries no configuration")
    cfg = config_from_dict(metadata["config"])
    if overrides:
        cfg = cfg.replace(**overrides)
    model = IatSegModel(cfg)
    weights, _ = split_optimizer_state(tensors)
    model.load_state_dict(weights)
    logger.debug(f"loaded {path} (step {metadata.get('step', 0)})")
    return model, cfg, metadata


def load_image(path: str) -> np.ndarray:
    """IATW 텐서 또는 Pillow 이미지 -> [3, H, W] float64 in [0, 1]"""
    if not os.path.exists(path):
        raise DataError(f"image not found: {path}")
    if get_file_extension(path) == ".iatw":
        image = load_tensor(path)
    elif is_image_file(path):
        with Image.open(path) as img:
            image = np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    else:
        raise DataError(f"unsupported image format: {path}")
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"image must have 3 channels, got shape {image.shape}")
    height, width = image.shape[1:]
    if height % SIZE_MULTIPLE or width % SIZE_MULTIPLE:
        raise DataError(f"image extent {height}x{width} is not a multiple of {SIZE_MULTIPLE}")
    return np.ascontiguousarray(image)


def detect(model: IatSegModel, image: np.ndarray, score_threshold: float, top_k: int) -> List[Prediction]:
    """Instances of the last decoder stage scoring above the threshold, best first.

    Masks stay on the mask-feature grid as probabilities.
    """
    with no_grad():
        output = model(image)
        final = output.final
        probs = ops.sigmoid(final.class_logits).data.astype(np.float64)
        scores = probs.max(axis=1)
        classes = probs.argmax(axis=1)
        order = np.argsort(-scores, kind="stable")
        keep = [int(q) for q in order if scores[q] > score_threshold][:top_k]
        if not keep:
            return []
        masks = model.mask_logits(output, len(output.stages) - 1, np.array(keep))
        mask_probs = ops.sigmoid(masks).data.astype(np.float64)
    boxes = final.boxes.data.astype(np.float64)
    return [Prediction(int(classes[q]), float(scores[q]), boxes[q].copy(), mask_probs[i])
            for i, q in enumerate(keep)]


def mask_to_pgm_array(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Probability mask -> uint8 [H, W] at image resolution."""
    full = resize_bilinear(mask, height, width) if mask.shape != (height, width) else mask
    return np.clip(np.rint(full * 255.0), 0, 255).astype(np.uint8)


def write_instances(out_dir: str, predictions: List[Prediction], height: int, width: int) -> List[str]:
    """instance_XX_<class>.pgm 파일들과 instances.txt 작성"""
    create_directory_if_not_exists(out_dir)
    lines = ["# index class score cx cy w h mask"]
    paths = []
    for i, pred in enumerate(predictions):
        label = sanitize_label(SHAPE_CLASSES[pred.class_id])
        name = f"instance_{i:02d}_{label}.pgm"
        path = os.path.join(out_dir, name)
        Image.fromarray(mask_to_pgm_array(pred.mask, height, width)).save(path)
        paths.append(path)
        box = " ".join(f"{v:.6f}" for v in pred.box)
        lines.append(f"{i} {SHAPE_CLASSES[pred.class_id]} {pred.score:.6f} {box} {name}")
    with open(os.path.join(out_dir, SIDECAR_NAME), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return paths


def run_inference(checkpoint: str, image_path: str, out_dir: str,
                  overrides: Optional[Dict[str, Any]] = None) -> List[Prediction]:
    model, cfg, _ = load_model(checkpoint, overrides)
    image = load_image(image_path)
    if image.shape[1] != cfg.image_size or image.shape[2] != cfg.image_size:
        logger.warning(f"⚠️ image is {image.shape[1]}x{image.shape[2]}, model trained at {cfg.image_size}")
    predictions = detect(model, image, cfg.score_threshold, cfg.top_k)
    write_instances(out_dir, predictions, image.shape[1], image.shape[2])
    logger.info(f"✅ {len(predictions)} instance(s) written to {out_dir}")
    return predictions

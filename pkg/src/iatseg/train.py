"""
학습 루프
배치 구성, 손실 계산, Adam 업데이트, JSON-lines 손실 로그, 체크포인트/재개
"""

import json
import os
import time
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .config import RunConfig
from .data import Scene, SceneDataset
from .errors import CheckpointError, NonFiniteError, TrainingError
from .evaluate import binarize_mask, mask_iou_matrix
from .logs import get_logger, setup_logging
from .matching import LOSS_TERMS, LossResult, LossWeights, SceneTargets, hungarian, matching_cost, total_loss
from .model import IatSegModel
from .optim import Adam, split_optimizer_state
from .serialize import load_checkpoint, save_checkpoint
from .tensor import ComputationTape, Tensor, backward, no_grad
from .utils import create_directory_if_not_exists, format_duration, format_timestamp

logger = get_logger(__name__)

LOSS_LOG_NAME = "loss.jsonl"
FINAL_CHECKPOINT = "checkpoint.iatc"


def checkpoint_name(step: int) -> str:
    return f"checkpoint_{step:05d}.iatc"


class Trainer:
    """Single-threaded trainer over an indexable collection of scenes."""

    def __init__(self, cfg: RunConfig, scenes: Sequence[Scene], out_dir: Optional[str] = None):
        if len(scenes) == 0:
            raise TrainingError("training set is empty")
        self.cfg = cfg
        self.scenes = scenes
        self.out_dir = out_dir
        self.model = IatSegModel(cfg)
        self.optimizer = Adam.from_config(self.model.parameters(), cfg)
        self.weights = LossWeights.from_config(cfg)
        self.step = 0
        self._targets: Dict[int, SceneTargets] = {}
        self._permutations: Dict[int, np.ndarray] = {}
        if out_dir:
            create_directory_if_not_exists(out_dir)

    # --- 데이터 순서 ---
    def _permutation(self, epoch: int) -> np.ndarray:
        if epoch not in self._permutations:
            rng = np.random.default_rng([self.cfg.seed, epoch])
            self._permutations[epoch] = rng.permutation(len(self.scenes))
        return self._permutations[epoch]

    def batch_indices(self, step: int) -> List[int]:
        """Scenes of 1-based `step`: consecutive slots of per-epoch permutations."""
        n = len(self.scenes)
        size = self.cfg.batch_size
        indices = []
        for slot in range((step - 1) * size, step * size):
            epoch, offset = divmod(slot, n)
            indices.append(int(self._permutation(epoch)[offset]))
        return indices

    def targets(self, index: int) -> SceneTargets:
        if index not in self._targets:
            self._targets[index] = self.scenes[index].targets(self.cfg.mask_stride)
        return self._targets[index]

    # --- 손실 ---
    def scene_loss(self, index: int) -> LossResult:
        output = self.model(self.scenes[index].image)

        def mask_fn(stage: int, query_indices: np.ndarray) -> Tensor:
            return self.model.mask_logits(output, stage, query_indices)

        return total_loss(output.stages, self.targets(index), self.weights, self.cfg.mask_stages,
                          mask_fn, self.cfg.match_mask_cost)

    def batch_loss(self, indices: Sequence[int]):
        """Mean loss over the batch -> (Tensor, breakdown of means)."""
        total = None
        breakdown = {name: 0.0 for name in LOSS_TERMS + ("total",)}
        for index in indices:
            result = self.scene_loss(index)
            total = result.total if total is None else total + result.total
            for name, value in result.breakdown.items():
                breakdown[name] += value / len(indices)
        return ops.scale(total, 1.0 / len(indices)), breakdown

    def _log_record(self, record: Dict[str, Any]) -> None:
        if not self.out_dir:
            return
        with open(os.path.join(self.out_dir, LOSS_LOG_NAME), "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def train_step(self) -> Dict[str, Any]:
        step = self.step + 1
        indices = self.batch_indices(step)
        self.model.zero_grad()
        try:
            with ComputationTape():
                loss, breakdown = self.batch_loss(indices)
                if not np.isfinite(loss.item()):
                    raise NonFiniteError("total_loss")
                backward(loss)
        except NonFiniteError as e:
            self._log_record({"step": step, "error": str(e)})
            raise TrainingError(f"non-finite loss ({e})", step) from e
        grad_norm = self.optimizer.step()
        self.step = step
        record = {"step": step, **{name: breakdown[name] for name in ("total",) + LOSS_TERMS},
                  "grad_norm": grad_norm, "lr": self.optimizer.lr_at(step)}
        self._log_record(record)
        return record

    # --- 체크포인트 ---
    def save_checkpoint(self, path: str) -> None:
        tensors = dict(self.model.state_dict())
        tensors.update(self.optimizer.state_dict())
        metadata = {"config": self.cfg.to_dict(), "step": self.step, "adam_t": self.optimizer.t}
        save_checkpoint(path, tensors, metadata)
        logger.debug(f"checkpoint saved: {path}")

    def resume(self, path: str) -> int:
        """Restore weights, optimizer moments and step counter."""
        tensors, metadata = load_checkpoint(path)
        for key in ("step", "adam_t"):
            if key not in metadata:
                raise CheckpointError(f"{path}: missing '{key}' in checkpoint metadata")
        weights, optim_state = split_optimizer_state(tensors)
        self.model.load_state_dict(weights)
        self.optimizer.load_state_dict(optim_state, metadata["adam_t"])
        self.step = int(metadata["step"])
        logger.info(f"resumed from {path} at step {self.step}")
        return self.step

    # --- 요약 ---
    def matched_mask_iou(self, count: Optional[int] = None) -> float:
        """Mean full-resolution mask IoU of final-stage predictions matched to targets."""
        count = len(self.scenes) if count is None else min(count, len(self.scenes))
        ious: List[float] = []
        with no_grad():
            for index in range(count):
                scene = self.scenes[index]
                targets = self.targets(index)
                if not len(targets):
                    continue
                output = self.model(scene.image)
                final = output.final
                cost = matching_cost(final.class_logits.data, final.boxes.data, targets, self.weights)
                pred_idx = hungarian(cost)
                logits = self.model.mask_logits(output, len(output.stages) - 1, pred_idx)
                probs = ops.sigmoid(logits).data
                pred = np.stack([binarize_mask(p, scene.height, scene.width) for p in probs])
                gt = np.stack([inst.mask.astype(bool) for inst in scene.instances])
                ious.extend(np.diag(mask_iou_matrix(pred, gt)).tolist())
        return float(np.mean(ious)) if ious else 0.0

    def train(self, steps: Optional[int] = None) -> Dict[str, Any]:
        """Run until `steps` total steps; returns the summary record."""
        steps = self.cfg.steps if steps is None else steps
        started = time.monotonic()
        logger.info(f"training from step {self.step} to {steps} ({format_timestamp(time.time())})")
        first_total = None
        record: Dict[str, Any] = {}
        while self.step < steps:
            record = self.train_step()
            if first_total is None:
                first_total = record["total"]
            if self.cfg.log_every and (self.step % self.cfg.log_every == 0 or self.step == steps):
                logger.info(f"step {self.step}/{steps} loss {record['total']:.4f} "
                            f"(cls {record['cls']:.3f}, l1 {record['l1']:.3f}, iou {record['iou']:.3f}, "
                            f"dice {record['dice']:.3f}, bce {record['bce']:.3f}) "
                            f"[{format_duration(time.monotonic() - started)}]")
            if self.out_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save_checkpoint(os.path.join(self.out_dir, checkpoint_name(self.step)))
        if self.out_dir:
            self.save_checkpoint(os.path.join(self.out_dir, FINAL_CHECKPOINT))
        summary = {"summary": True, "step": self.step,
                   "train_mask_iou": self.matched_mask_iou(self.cfg.summary_scenes)}
        if record:
            summary["final_total"] = record["total"]
        if first_total is not None:
            summary["first_total"] = first_total
        self._log_record(summary)
        logger.info(f"✅ training done: step {self.step}, train mask IoU {summary['train_mask_iou']:.3f}")
        return summary


def run_training(cfg: RunConfig, data_dir: str, out_dir: str, resume: Optional[str] = None) -> Dict[str, Any]:
    """Train on a generated split; writes config.resolved, run.log, loss.jsonl and checkpoints."""
    create_directory_if_not_exists(out_dir)
    setup_logging(cfg.log_level, os.path.join(out_dir, "run.log"))
    cfg.save(os.path.join(out_dir, "config.resolved"))
    dataset = SceneDataset(data_dir)
    if dataset.size != cfg.image_size:
        logger.warning(f"⚠️ dataset size {dataset.size} differs from image_size {cfg.image_size}")
    trainer = Trainer(cfg, dataset, out_dir)
    if resume:
        trainer.resume(resume)
    return trainer.train()

"""
실행 설정
key = value 형식의 설정 파일을 읽어 RunConfig로 변환
"""

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .errors import ConfigError
from .utils import format_int_list, parse_int_list

PE_MODES = ("none", "abs", "rel")
PRECISIONS = ("float64", "float32")
SIZE_MULTIPLE = 64


def _opt(default, doc: str):
    if isinstance(default, (list, tuple)):
        return field(default_factory=lambda: tuple(default), metadata={"doc": doc})
    return field(default=default, metadata={"doc": doc})


@dataclass
class RunConfig:
    """모든 모듈의 기본값을 담는 설정 (ablation 축 포함)"""

    # 실행
    seed: int = _opt(7, "global random seed (weights init, data order)")
    precision: str = _opt("float64", "tensor precision: float64 | float32")
    log_level: str = _opt("INFO", "console log level: DEBUG | INFO | WARNING | ERROR")

    # 입력 / backbone
    image_size: int = _opt(64, "input extent in pixels (multiple of 64)")
    num_classes: int = _opt(3, "number of shape classes")
    backbone_channels: Tuple[int, ...] = _opt((8, 16, 32, 32, 32), "channels of the 5 stride-2 backbone stages")

    # transformer
    d_model: int = _opt(32, "transformer width d")
    ffn_dim: int = _opt(64, "FFN hidden width")
    enc_layers: int = _opt(2, "deformable encoder layers")
    dec_layers: int = _opt(2, "decoder layers / supervised stages")
    enc_heads: int = _opt(8, "encoder deformable attention heads M")
    enc_points: int = _opt(4, "encoder sampling points K per head and level")
    dec_heads: int = _opt(8, "decoder self/cross attention heads")
    dec_points: int = _opt(4, "decoder sampling points K per head and level")
    num_queries: int = _opt(20, "object queries N")
    pe_temperature: float = _opt(10000.0, "sinusoidal encoding temperature")
    pe_normalize: bool = _opt(False, "scale coordinates to [0, 2pi] before encoding")

    # mask head
    mask_channels: int = _opt(8, "C_mask, channels of the shared mask feature")
    mask_heads: int = _opt(4, "heads M of the instance-aware transformer")
    mask_points: int = _opt(4, "sampling points K of the instance-aware transformer")
    mask_encoder_layers: int = _opt(1, "deformable layers in the mask encoder (0 = projection only)")
    pe_mode: str = _opt("rel", "mask-head positional encoding: none | abs | rel")
    share_stage_heads: bool = _opt(True, "share class/box/mask heads across decoder stages")

    # loss
    mask_stages: int = _opt(2, "last decoder stages receiving mask loss (0 = detection only)")
    cls_weight: float = _opt(2.0, "lambda_cls")
    l1_weight: float = _opt(5.0, "lambda_L1")
    iou_weight: float = _opt(2.0, "lambda_iou (GIoU)")
    dice_weight: float = _opt(8.0, "lambda_dice")
    bce_weight: float = _opt(2.0, "lambda_bce")
    focal_alpha: float = _opt(0.25, "focal loss alpha")
    focal_gamma: float = _opt(2.0, "focal loss gamma")
    match_mask_cost: bool = _opt(False, "add dice/bce terms to the matching cost")

    # optimizer
    lr: float = _opt(1e-3, "Adam learning rate")
    beta1: float = _opt(0.9, "Adam beta1")
    beta2: float = _opt(0.999, "Adam beta2")
    adam_eps: float = _opt(1e-8, "Adam epsilon")
    weight_decay: float = _opt(0.0, "decoupled weight decay")
    grad_clip: float = _opt(1.0, "global gradient-norm clip (0 = off)")
    lr_drop_step: int = _opt(0, "step at which lr is multiplied by lr_drop_factor (0 = never)")
    lr_drop_factor: float = _opt(0.1, "learning-rate drop factor")

    # 학습 루프
    steps: int = _opt(300, "training steps")
    batch_size: int = _opt(16, "scenes per step")
    log_every: int = _opt(10, "console progress interval in steps")
    checkpoint_every: int = _opt(100, "checkpoint interval in steps (0 = final only)")
    summary_scenes: int = _opt(100, "train scenes used for the final mask-IoU summary")

    # 추론 / 평가
    score_threshold: float = _opt(0.3, "minimum class score of an output instance")
    top_k: int = _opt(10, "maximum instances per image")

    # 데이터 생성
    min_instances: int = _opt(1, "minimum shapes painted per scene")
    max_instances: int = _opt(3, "maximum shapes painted per scene")
    min_size_px: int = _opt(10, "minimum shape extent in pixels")
    max_size_px: int = _opt(32, "maximum shape extent in pixels")
    min_visible_px: int = _opt(16, "instances with fewer visible pixels are dropped")
    data_workers: int = _opt(4, "threads used for scene generation")

    @property
    def mask_stride(self) -> int:
        return 8

    @property
    def mask_grid(self) -> int:
        return self.image_size // self.mask_stride

    def validate(self) -> "RunConfig":
        """값 범위 검사; 문제가 있으면 ConfigError"""
        problems: List[str] = []
        if self.image_size <= 0 or self.image_size % SIZE_MULTIPLE:
            problems.append(f"image_size must be a positive multiple of {SIZE_MULTIPLE}, got {self.image_size}")
        if self.precision not in PRECISIONS:
            problems.append(f"precision must be one of {PRECISIONS}")
        if self.pe_mode not in PE_MODES:
            problems.append(f"pe_mode must be one of {PE_MODES}")
        if len(self.backbone_channels) != 5:
            problems.append("backbone_channels needs exactly 5 stages")
        for name in ("d_model", "ffn_dim", "num_queries", "num_classes", "mask_channels",
                     "mask_heads", "mask_points", "enc_heads", "enc_points", "dec_heads",
                     "dec_points", "dec_layers", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("enc_layers", "mask_encoder_layers", "steps", "lr_drop_step", "checkpoint_every"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.d_model % 4:
            problems.append("d_model must be divisible by 4 (2-D sinusoidal split)")
        for heads in ("enc_heads", "dec_heads"):
            if getattr(self, heads) >= 1 and self.d_model % getattr(self, heads):
                problems.append(f"d_model must be divisible by {heads}")
        if self.mask_heads >= 1 and self.mask_channels % self.mask_heads:
            problems.append("mask_channels must be divisible by mask_heads")
        if self.pe_mode != "none" and self.mask_channels % 4:
            problems.append("mask_channels must be divisible by 4 when a positional encoding is used")
        if not 0 <= self.mask_stages <= self.dec_layers:
            problems.append(f"mask_stages must be in 0..{self.dec_layers}, got {self.mask_stages}")
        for name in ("cls_weight", "l1_weight", "iou_weight", "dice_weight", "bce_weight"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be nonnegative")
        if not 0 <= self.min_instances <= self.max_instances:
            problems.append("need 0 <= min_instances <= max_instances")
        if not 1 <= self.min_size_px <= self.max_size_px <= self.image_size:
            problems.append("need 1 <= min_size_px <= max_size_px <= image_size")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    # --- 변환 ---
    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def dump(self) -> str:
        """주석 포함 key = value 텍스트"""
        lines = ["# resolved configuration"]
        for f in fields(self):
            lines.append(f"# {f.metadata.get('doc', '')}")
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dump())


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return format_int_list(value)
    return str(value)


def _field_map() -> Dict[str, dataclasses.Field]:
    return {f.name: f for f in fields(RunConfig)}


def _parse_value(name: str, raw: str) -> Any:
    f = _field_map()[name]
    default = RunConfig().__getattribute__(name)
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {text}")
        if isinstance(default, tuple):
            return tuple(parse_int_list(text))
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"invalid value for '{f.name}': {e}") from None


def parse_assignments(items: Iterable[str], source: str = "<args>") -> Dict[str, Any]:
    """['key = value', ...] -> {key: typed value}; 알 수 없는 키는 거부"""
    known = _field_map()
    values: Dict[str, Any] = {}
    for lineno, line in enumerate(items, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{line.strip()}'")
        key, raw = (part.strip() for part in text.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
        values[key] = _parse_value(key, raw)
    return values


def read_assignments(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """설정 파일에 적힌 키 + 오버라이드만 모은 dict (기본값은 채우지 않음)"""
    values: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                values.update(parse_assignments(f.read().splitlines(), source=path))
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None
    if overrides:
        unknown = set(overrides) - set(_field_map())
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        values.update(overrides)
    return values


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """설정 파일 + 오버라이드 -> 검증된 RunConfig"""
    return RunConfig(**read_assignments(path, overrides)).validate()


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """체크포인트 메타데이터에 저장된 설정 복원"""
    known = _field_map()
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    return RunConfig(**values).validate()

"""
불변식 검사 스위트
params / pe / grad / norm / match / loss / ablation, 각 스위트는 (성공 여부, 메시지) 반환
"""

import itertools
import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .config import RunConfig
from .data import SceneConfig, generate_scene
from .deformable import AttentionTrace
from .gradcheck import check_gradients, check_parameters
from .iat import expected_param_count, flatten_params, unpack_params
from .logs import get_logger
from .matching import LossWeights, assignment_cost, dice_loss, hungarian, total_loss
from .model import IatSegModel
from .posenc import EncodingConfig, relative_pe_array
from .tensor import ComputationTape, Tensor, backward, no_grad
from .train import Trainer
from .utils import format_duration

logger = get_logger(__name__)

SuiteResult = Tuple[bool, str]

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
PE_TOLERANCE = 1e-12
NORM_TOLERANCE = 1e-12


# --- params ---

def check_params() -> SuiteResult:
    problems = []
    for (c, m, k), expected in (((8, 4, 4), 441), ((8, 8, 4), 873)):
        got = expected_param_count(c, m, k)
        if got != expected:
            problems.append(f"D(C={c}, M={m}, K={k}) = {got}, expected {expected}")
    rng = np.random.default_rng(0)
    for c, m, k in ((8, 4, 4), (8, 8, 4), (4, 1, 2), (16, 4, 4)):
        d = expected_param_count(c, m, k)
        vec = Tensor(rng.normal(size=(3, d)))
        back = flatten_params(unpack_params(vec, c, m, k))
        if back.shape != vec.shape or not np.array_equal(back.data, vec.data):
            problems.append(f"unpack/flatten round trip differs for C={c}, M={m}, K={k}")
    if problems:
        return False, "; ".join(problems)
    return True, "D = 441 and 873, unpack/flatten exact"


# --- pe ---

def _shifted_sinusoid(height: int, width: int, center: np.ndarray, d_model: int, temperature: float) -> np.ndarray:
    """sin/cos of (pos - center) channel by channel; x half first, even channels sin."""
    half = d_model // 2
    out = np.empty((d_model, height, width))
    for channel in range(d_model):
        on_y = channel >= half
        k = channel - half if on_y else channel
        freq = temperature ** (2 * (k // 2) / half)
        coord = np.arange(height)[:, None] - center[1] if on_y else np.arange(width)[None, :] - center[0]
        wave = np.sin(coord / freq) if k % 2 == 0 else np.cos(coord / freq)
        out[channel] = np.broadcast_to(wave, (height, width))
    return out


def check_pe(trials: int = 100, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        h, w = (int(v) for v in rng.integers(1, 17, size=2))
        d = int(rng.choice([4, 8, 16, 32]))
        cfg = EncodingConfig(d)
        center = rng.uniform(-2.0, [w + 1.0, h + 1.0])
        rel = relative_pe_array(h, w, center, cfg)
        shifted = _shifted_sinusoid(h, w, center, d, cfg.temperature)
        worst = max(worst, float(np.max(np.abs(rel - shifted))))
    if worst > PE_TOLERANCE:
        return False, f"relative encoding differs from shifted absolute by {worst:.3e}"
    return True, f"{trials} grids, max difference {worst:.1e}"


# --- grad ---

def _op_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[Tensor], Tensor], Tuple[int, ...]]]:
    const = lambda shape: Tensor(rng.normal(size=shape))  # noqa: E731
    w35, b5 = const((5, 3)), const((5,))
    w_batch, b_batch = const((2, 5, 3)), const((2, 5))
    kernels, kbias = const((2, 3, 3, 3)), const((2,))
    other = const((4, 3))
    positive = lambda x: ops.exp(ops.scale(x, 0.3))  # noqa: E731
    return [
        ("add", lambda x: ops.add(x, other), (4, 3)),
        ("sub", lambda x: ops.sub(other, x), (4, 3)),
        ("mul", lambda x: ops.mul(x, x), (4, 3)),
        ("div", lambda x: ops.div(other, ops.add(positive(x), 1.0)), (4, 3)),
        ("maximum", lambda x: ops.maximum(x, other), (4, 3)),
        ("minimum", lambda x: ops.minimum(x, other), (4, 3)),
        ("relu", ops.relu, (4, 3)),
        ("sigmoid", ops.sigmoid, (4, 3)),
        ("log_sigmoid", ops.log_sigmoid, (4, 3)),
        ("exp", ops.exp, (4, 3)),
        ("log", lambda x: ops.log(positive(x)), (4, 3)),
        ("power", lambda x: ops.power(positive(x), 2.5), (4, 3)),
        ("abs", ops.abs, (4, 3)),
        ("matmul", lambda x: ops.matmul(x, ops.transpose(other, (1, 0))), (4, 3)),
        ("linear", lambda x: ops.linear(x, w35, b5), (4, 3)),
        ("linear_batched", lambda x: ops.linear(x, w_batch, b_batch), (2, 4, 3)),
        ("softmax", lambda x: ops.softmax(x, axis=-1), (4, 3)),
        ("layer_norm", lambda x: ops.layer_norm(x, const((3,)), const((3,))), (4, 3)),
        ("mean", lambda x: ops.mean(x, axis=0), (4, 3)),
        ("reshape_transpose", lambda x: ops.transpose(ops.reshape(x, (3, 4)), (1, 0)), (4, 3)),
        ("getitem", lambda x: ops.getitem(x, np.array([2, 0, 2])), (4, 3)),
        ("concat", lambda x: ops.concat([x, ops.scale(x, 2.0)], axis=1), (4, 3)),
        ("stack", lambda x: ops.stack([x, ops.relu(x)], axis=0), (4, 3)),
        ("broadcast_to", lambda x: ops.broadcast_to(ops.reshape(x, (1, 4, 3)), (2, 4, 3)), (4, 3)),
        ("conv2d", lambda x: ops.conv2d(x, kernels, kbias, stride=2, padding=1), (3, 6, 6)),
        ("bilinear_map", lambda x: ops.bilinear_sample(x, [(0.3, 1.7), (2.25, 0.4), (-0.5, 3.6)]), (2, 4, 4)),
        ("bilinear_coords", lambda x: ops.bilinear_sample(const((2, 4, 4)), ops.add(x, 1.3)), (3, 2)),
    ]


def _scalarize(out: Tensor, rng_weights: Dict[Tuple[int, ...], np.ndarray]) -> Tensor:
    if out.shape not in rng_weights:
        rng_weights[out.shape] = np.random.default_rng(len(rng_weights)).normal(size=out.shape)
    return ops.sum(ops.mul(out, ops.constant(rng_weights[out.shape], like=out)))


def op_gradient_errors(seed: int = 0) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    errors = {}
    weights: Dict[Tuple[int, ...], np.ndarray] = {}
    for name, fn, shape in _op_cases(rng):
        x = Tensor(rng.normal(size=shape) * 0.8)
        errors[name] = check_gradients(lambda: _scalarize(fn(x), weights), [x])
    return errors


def micro_config(**changes) -> RunConfig:
    """Smallest configuration exercising every module."""
    base = dict(d_model=8, ffn_dim=16, enc_layers=1, dec_layers=1, enc_heads=2, enc_points=2,
                dec_heads=2, dec_points=2, num_queries=2, backbone_channels=(4, 4, 8, 8, 8),
                mask_channels=4, mask_heads=2, mask_points=2, mask_encoder_layers=1, mask_stages=1,
                min_instances=1, max_instances=1, batch_size=1)
    base.update(changes)
    return RunConfig(**base).validate()


def jitter_parameters(model: IatSegModel, seed: int, scale: float = 0.05, offset_scale: float = 0.3) -> None:
    """Move the parameters off their structured initial values (zero weights, integer offsets)."""
    rng = np.random.default_rng(seed)
    for name, p in model.parameters().items():
        sigma = offset_scale if "offset_proj" in name else scale
        p.data = (p.data + rng.normal(0.0, sigma, size=p.shape)).astype(p.data.dtype)


def model_gradient_error(seed: int = 0, per_param: int = 3) -> Tuple[float, str]:
    """End-to-end finite-difference check on one micro scene."""
    cfg = micro_config(seed=seed)
    model = IatSegModel(cfg)
    jitter_parameters(model, seed + 1)
    scene = generate_scene(seed, SceneConfig(cfg.image_size, 1, 1, 16, 32, 16))
    targets = scene.targets(cfg.mask_stride)
    weights = LossWeights.from_config(cfg)

    with no_grad():
        first_pass = model(scene.image)
        centers = [pred.boxes.data[:, :2].copy() for pred in first_pass.stages]

    def loss_fn() -> Tensor:
        output = model(scene.image)

        def mask_fn(stage, idx):
            return model.mask_logits(output, stage, idx, centers=centers[stage][idx])

        return total_loss(output.stages, targets, weights, cfg.mask_stages, mask_fn).total

    return check_parameters(loss_fn, model.parameters(), per_param=per_param, seed=seed)


def check_grad(seeds: int = 10) -> SuiteResult:
    errors: Dict[str, float] = {}
    for seed in range(seeds):
        for name, err in op_gradient_errors(seed).items():
            errors[name] = max(errors.get(name, 0.0), err)
    failed = {name: err for name, err in errors.items() if not err < OP_TOLERANCE}
    worst, worst_name = model_gradient_error()
    lines = [f"{len(errors)} ops x {seeds} inputs, max error {max(errors.values()):.2e}",
             f"end-to-end max error {worst:.2e} ({worst_name or '-'})"]
    if failed:
        lines.append("failed ops: " + ", ".join(f"{n} ({e:.2e})" for n, e in sorted(failed.items())))
    if not worst < MODEL_TOLERANCE:
        lines.append(f"end-to-end error {worst:.2e} exceeds {MODEL_TOLERANCE}")
    return not failed and worst < MODEL_TOLERANCE, "; ".join(lines)


# --- norm ---

def check_norm(trials: int = 3, seed: int = 0) -> SuiteResult:
    cfg = micro_config(d_model=16, enc_layers=2, dec_layers=2, enc_heads=4, dec_heads=4,
                       num_queries=4, mask_channels=8, mask_heads=4, mask_stages=2)
    worst = 0.0
    kinds = set()
    mask_range = (1.0, 0.0)
    for trial in range(trials):
        model = IatSegModel(cfg.replace(seed=seed + trial))
        jitter_parameters(model, seed + trial, scale=0.2, offset_scale=1.0)
        image = np.random.default_rng(seed + trial).uniform(size=(3, cfg.image_size, cfg.image_size))
        trace = AttentionTrace()
        with no_grad():
            output = model(image, trace)
            probs = ops.sigmoid(model.mask_logits(output, cfg.dec_layers - 1,
                                                  np.arange(cfg.num_queries), trace)).data
        for kind, weights in trace.records:
            kinds.add(kind)
            worst = max(worst, float(np.max(np.abs(weights.sum(axis=-1) - 1.0))))
        mask_range = (min(mask_range[0], float(probs.min())), max(mask_range[1], float(probs.max())))
    missing = {"deform", "self", "instance"} - kinds
    problems = []
    if missing:
        problems.append(f"no attention recorded for {sorted(missing)}")
    if worst > NORM_TOLERANCE:
        problems.append(f"attention sums deviate from 1 by {worst:.3e}")
    if not (0.0 < mask_range[0] and mask_range[1] < 1.0):
        problems.append(f"mask probabilities reach {mask_range}")
    if problems:
        return False, "; ".join(problems)
    return True, f"{sorted(kinds)} normalized within {worst:.1e}, masks in ({mask_range[0]:.3f}, {mask_range[1]:.3f})"


# --- match ---

def brute_force_cost(cost: np.ndarray) -> float:
    """Minimum over every injective assignment of targets (columns) to predictions (rows)."""
    n, g = cost.shape
    return min(assignment_cost(cost.T, np.array(rows)) for rows in itertools.permutations(range(n), g))


def check_match(trials: int = 1000, max_n: int = 7, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(trials):
        n = int(rng.integers(1, max_n + 1))
        g = int(rng.integers(0, n + 1))
        cost = rng.integers(0, 10, size=(n, g)).astype(np.float64) if rng.random() < 0.3 \
            else rng.normal(size=(n, g))
        assignment = hungarian(cost)
        if len(set(assignment.tolist())) != g:
            mismatches += 1
            continue
        gap = abs(assignment_cost(cost.T, assignment) - brute_force_cost(cost)) if g else 0.0
        if gap > 1e-12 * (1.0 + np.abs(cost).sum()):
            mismatches += 1
    if mismatches:
        return False, f"{mismatches}/{trials} assignments differ from brute force"
    return True, f"{trials} random matrices (N <= {max_n}) match brute force"


# --- loss ---

def check_loss(seed: int = 0) -> SuiteResult:
    problems = []
    rng = np.random.default_rng(seed)
    mask = (rng.random((8, 8)) < 0.4).astype(np.float64)
    if dice_loss(Tensor(mask), mask).item() != 0.0:
        problems.append("dice of identical masks is not 0")
    for n in (1, 5, 17):
        a = np.zeros(64)
        b = np.zeros(64)
        a[:n] = 1.0
        b[n:2 * n] = 1.0
        got = dice_loss(Tensor(a.reshape(8, 8)), b.reshape(8, 8)).item()
        if abs(got - (1.0 - 1.0 / (2 * n + 1))) > 1e-12:
            problems.append(f"dice of disjoint {n}-pixel masks is {got}")

    cfg = micro_config(mask_stages=0)
    scene = generate_scene(seed, SceneConfig(cfg.image_size, 1, 1, 16, 32, 16))
    trainer = Trainer(cfg, [scene])
    model = trainer.model
    with ComputationTape():
        result = trainer.scene_loss(0)
        backward(result.total)
    if result.breakdown["dice"] != 0.0 or result.breakdown["bce"] != 0.0:
        problems.append("mask_stages=0 still reports dice/bce")
    leaked = [name for name, p in model.parameters().items()
              if (name.startswith("mask_encoder.") or ".mask." in name)
              and p.grad is not None and np.any(p.grad != 0)]
    if leaked:
        problems.append(f"mask_stages=0 leaves gradients on {leaked[:3]}")
    if problems:
        return False, "; ".join(problems)
    return True, "dice identities exact, mask_stages=0 disables mask supervision"


# --- ablation ---

ABLATION_AXES: Dict[str, Tuple[str, Sequence]] = {
    "mask_heads": ("mask_heads", (1, 2, 4, 8)),
    "mask_channels": ("mask_channels", (4, 8, 16)),
    "mask_encoder_layers": ("mask_encoder_layers", (0, 1, 2)),
    "pe_mode": ("pe_mode", ("none", "abs", "rel")),
    "mask_stages": ("mask_stages", tuple(range(7))),
}


def ablation_configs(base: RunConfig) -> List[Tuple[str, RunConfig]]:
    configs = []
    for axis, (key, values) in ABLATION_AXES.items():
        for value in values:
            changes = {key: value}
            if key == "mask_stages":
                changes["dec_layers"] = 6
            if key == "mask_channels":
                changes["mask_heads"] = 4
            configs.append((f"{axis}={value}", base.replace(**changes)))
    return configs


def run_ablation_case(cfg: RunConfig, scenes, steps: int = 10) -> str:
    trainer = Trainer(cfg, scenes)
    d = expected_param_count(cfg.mask_channels, cfg.mask_heads, cfg.mask_points)
    for _ in range(steps):
        trainer.train_step()
    with no_grad():
        output = trainer.model(scenes[0].image)
        masks = trainer.model.mask_logits(output, len(output.stages) - 1, np.arange(cfg.num_queries))
    grid = (cfg.mask_grid, cfg.mask_grid)
    if output.final.dyn_params.shape != (cfg.num_queries, d):
        raise AssertionError(f"dynamic parameters {output.final.dyn_params.shape}, expected D={d}")
    if output.mask_feature.map.shape != (cfg.mask_channels,) + grid:
        raise AssertionError(f"mask feature {output.mask_feature.map.shape}")
    if masks.shape != (cfg.num_queries,) + grid:
        raise AssertionError(f"masks {masks.shape}")
    if len(output.stages) != cfg.dec_layers:
        raise AssertionError(f"{len(output.stages)} stages for {cfg.dec_layers} decoder layers")
    return f"D={d}"


def check_ablation(steps: int = 10, base: Optional[RunConfig] = None) -> SuiteResult:
    base = base or RunConfig(batch_size=1, num_queries=10).validate()
    scene_cfg = SceneConfig.from_run_config(base)
    scenes = [generate_scene(i, scene_cfg) for i in range(4)]
    failures, done = [], []
    for label, cfg in ablation_configs(base):
        try:
            done.append(f"{label} ({run_ablation_case(cfg, scenes, steps)})")
        except Exception as e:  # noqa: BLE001
            failures.append(f"{label}: {e}")
    if failures:
        return False, "; ".join(failures)
    return True, f"{len(done)} configs trained {steps} steps: " + ", ".join(done)


SUITES: Dict[str, Callable[[], SuiteResult]] = {
    "params": check_params,
    "pe": check_pe,
    "grad": check_grad,
    "norm": check_norm,
    "match": check_match,
    "loss": check_loss,
    "ablation": check_ablation,
}
ALL_SUITES = ("params", "pe", "grad", "norm", "match", "loss")


def resolve_suites(name: str) -> List[str]:
    if name == "all":
        return list(ALL_SUITES)
    if name not in SUITES:
        raise ValueError(f"unknown suite '{name}' (choose from all, {', '.join(SUITES)})")
    return [name]


def run_suites(name: str) -> List[Tuple[str, bool, str]]:
    """선택한 스위트 실행 -> [(이름, 성공 여부, 메시지)]"""
    results = []
    for suite in resolve_suites(name):
        started = time.monotonic()
        try:
            ok, message = SUITES[suite]()
        except Exception as e:  # noqa: BLE001
            ok, message = False, f"{type(e).__name__}: {e}"
        elapsed = format_duration(time.monotonic() - started)
        if ok:
            logger.info(f"✅ {suite}: {message} [{elapsed}]")
        else:
            logger.error(f"❌ {suite}: {message} [{elapsed}]")
        results.append((suite, ok, message))
    return results

"""
명령행 인터페이스
generate / train / eval / infer / check 서브커맨드
"""

import argparse
import json
import os
import sys
from typing import Any, Dict, List, Optional

from .checks import SUITES, run_suites
from .config import load_config, parse_assignments, read_assignments
from .data import SceneConfig, SceneDataset
from .dataset_manager import DatasetManager
from .errors import ConfigError, IatsegError
from .evaluate import evaluate, ground_truth_predictions
from .infer import detect, load_model, run_inference
from .logs import LogLevel, get_logger, setup_logging
from .train import run_training

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


RESOLVED_CONFIG_NAME = "config.resolved"


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """--set 값과 --log-level (명시된 경우)"""
    overrides = parse_assignments(args.set or [], source="--set")
    if args.log_level:
        overrides["log_level"] = LogLevel.parse(args.log_level).name
    return overrides


def _checkpoint_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """체크포인트 설정 위에 얹을 키: 설정 파일에 적힌 키, 그 다음 --set"""
    return read_assignments(args.config, _overrides(args))


def cmd_generate(args: argparse.Namespace) -> int:
    overrides = _overrides(args)
    overrides["image_size"] = args.size
    if args.workers is not None:
        overrides["data_workers"] = args.workers
    cfg = load_config(args.config, overrides)
    manager = DatasetManager(SceneConfig.from_run_config(cfg), cfg.data_workers)
    ok, message = manager.generate(args.out, args.scenes, args.seed,
                                   status_callback=lambda msg: logger.info(msg))
    if not ok:
        logger.error(f"❌ {message}")
        return EXIT_RUNTIME
    cfg.save(os.path.join(args.out, RESOLVED_CONFIG_NAME))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    overrides = _overrides(args)
    if args.steps is not None:
        overrides["steps"] = args.steps
    cfg = load_config(args.config, overrides)
    summary = run_training(cfg, args.data, args.out, resume=args.resume)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    dataset = SceneDataset(args.data)
    scenes = dataset.scenes()
    if args.gt_oracle:
        predictions = [ground_truth_predictions(scene) for scene in scenes]
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (or --gt-oracle)")
        model, cfg, _ = load_model(args.checkpoint, _checkpoint_overrides(args))
        predictions = [detect(model, scene.image, cfg.score_threshold, cfg.top_k) for scene in scenes]
    report = evaluate(predictions, scenes)
    text = json.dumps(report.to_dict(), sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    overrides = _checkpoint_overrides(args)
    if args.score_threshold is not None:
        overrides["score_threshold"] = args.score_threshold
    if args.top_k is not None:
        overrides["top_k"] = args.top_k
    run_inference(args.checkpoint, args.image, args.out, overrides)
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    results = run_suites(args.suite)
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, message in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {message}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser.add_argument("--log-level", help="DEBUG | INFO | WARNING | ERROR")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iatseg", description="Instance-aware transformer segmentation on synthetic scenes")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("generate", help="write a synthetic scene split")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--workers", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a generated split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mask/box AP of a checkpoint on a split")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--gt-oracle", action="store_true", help="score the ground truth itself")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict instance masks for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--score-threshold", type=float, help="minimum class score of an output instance")
    p.add_argument("--top-k", type=int, help="maximum instances written")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("check", help="run invariant suites")
    p.add_argument("--suite", default="all", choices=["all"] + list(SUITES))
    _add_common(p)
    p.set_defaults(func=cmd_check)
    return parser


def _log_level(args: argparse.Namespace) -> str:
    if args.log_level:
        return args.log_level
    try:
        return load_config(args.config).log_level if args.config else "INFO"
    except ConfigError:
        return "INFO"


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        setup_logging(_log_level(args))
    except (UsageError, ValueError) as e:
        print(f"iatseg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"iatseg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        logger.error(f"❌ {e}")
        return EXIT_USAGE
    except (IatsegError, OSError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

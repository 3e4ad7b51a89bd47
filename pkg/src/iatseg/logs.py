"""
로깅 설정
"[LEVEL] 메시지" 형식의 콘솔/파일 로그
"""

import logging
import sys
from enum import Enum
from typing import Optional, Union


class LogLevel(Enum):
    """로그 레벨 정의"""
    DEBUG = logging.DEBUG
    INFO = logging.INFO
    WARNING = logging.WARNING
    ERROR = logging.ERROR

    @classmethod
    def parse(cls, value: Union[str, "LogLevel"]) -> "LogLevel":
        if isinstance(value, LogLevel):
            return value
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown log level: {value}") from None


ROOT_LOGGER = "iatseg"
_FORMAT = "[%(levelname)s] %(message)s"
_FILE_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def get_logger(name: str) -> logging.Logger:
    """모듈별 로거 반환 (iatseg 하위 로거)"""
    if name == ROOT_LOGGER or name.startswith(ROOT_LOGGER + "."):
        return logging.getLogger(name)
    return logging.getLogger(f"{ROOT_LOGGER}.{name}")


def setup_logging(level: Union[str, LogLevel] = LogLevel.INFO,
                  log_file: Optional[str] = None) -> logging.Logger:
    """콘솔 핸들러(와 선택적으로 파일 핸들러)를 설치"""
    log_level = LogLevel.parse(level)
    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(log_level.value)
    logger.propagate = False

    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler(sys.stderr)
    console.setFormatter(logging.Formatter(_FORMAT))
    logger.addHandler(console)

    if log_file:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(_FILE_FORMAT))
        logger.addHandler(file_handler)

    logger.debug(f"로그 레벨이 {log_level.name}로 설정되었습니다")
    return logger

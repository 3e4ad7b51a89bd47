"""
예외 클래스 정의
iatseg 전체에서 사용하는 에러 계층
"""

from typing import Optional


class IatsegError(Exception):
    """모든 iatseg 예외의 기본 클래스"""


class ShapeError(IatsegError):
    """텐서 shape이 연산 조건에 맞지 않음"""


class NonFiniteError(IatsegError):
    """연산 결과에 NaN/Inf가 포함됨"""

    def __init__(self, op_name: str):
        super().__init__(f"non-finite output from '{op_name}'")
        self.op_name = op_name


class TapeError(IatsegError):
    """Backward on a consumed tape, or on a non-scalar / unreachable loss."""


class GradCheckError(IatsegError):
    """Finite-difference check saw a non-deterministic function."""


class ConfigError(IatsegError):
    """설정 파일 또는 설정 값 오류"""


class DataError(IatsegError):
    """데이터셋 파일 형식 또는 내용 오류"""


class CheckpointError(IatsegError):
    """체크포인트 파일 손상 또는 모델 구성과 불일치"""


class TrainingError(IatsegError):
    """학습 중단 (예: 손실이 NaN)"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class DegenerateBoxError(IatsegError):
    """박스의 enclosing 영역 넓이가 0"""

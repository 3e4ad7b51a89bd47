"""
유틸리티 함수들
경로, 파일명, 시간/크기 포맷 등 공통 헬퍼
"""

import os
import re
import time
from typing import Iterable, List, Tuple


def create_directory_if_not_exists(path: str) -> str:
    """디렉토리가 존재하지 않으면 생성하고 경로를 반환"""
    if path and not os.path.exists(path):
        os.makedirs(path, exist_ok=True)
    return path


def ensure_writable_directory(path: str) -> Tuple[bool, str]:
    """출력 디렉토리를 만들고 쓰기 가능한지 확인"""
    try:
        create_directory_if_not_exists(path)
    except OSError as e:
        return False, f"디렉토리 생성 실패: {e}"
    if not os.path.isdir(path):
        return False, f"not a directory: {path}"
    if not os.access(path, os.W_OK):
        return False, f"directory is not writable: {path}"
    return True, path


def scene_filename(index: int, extension: str) -> str:
    """scene_00042.json 형태의 파일명"""
    return f"scene_{index:05d}{extension}"


def sanitize_label(label: str) -> str:
    """Make a class name safe for use inside output file names."""
    sanitized = re.sub(r'[<>:"/\\|?*\s]', '_', label)
    sanitized = re.sub(r'_+', '_', sanitized).strip('_')
    return sanitized or "unnamed"


def get_file_extension(filename: str) -> str:
    """파일 확장자 추출"""
    _, ext = os.path.splitext(filename)
    return ext.lower()


def is_image_file(filename: str) -> bool:
    """Pillow로 읽을 수 있는 이미지 파일인지 확인"""
    image_extensions = {'.png', '.jpg', '.jpeg', '.bmp', '.ppm', '.pgm', '.tif', '.tiff', '.webp'}
    return get_file_extension(filename) in image_extensions


def parse_int_list(text: str) -> List[int]:
    """'8, 16, 32' -> [8, 16, 32]"""
    parts = [p.strip() for p in text.split(',')]
    return [int(p) for p in parts if p]


def format_int_list(values: Iterable[int]) -> str:
    return ",".join(str(v) for v in values)


def format_duration(seconds: float) -> str:
    """경과 시간을 읽기 쉬운 형태로 변환"""
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, sec = divmod(int(round(seconds)), 60)
    if minutes < 60:
        return f"{minutes}m {sec:02d}s"
    hours, minutes = divmod(minutes, 60)
    return f"{hours}h {minutes:02d}m"


def get_human_readable_size(size_bytes: float) -> str:
    """바이트 크기를 사람이 읽기 쉬운 형태로 변환"""
    if size_bytes == 0:
        return "0 B"

    size_names = ["B", "KB", "MB", "GB", "TB"]
    i = 0
    while size_bytes >= 1024 and i < len(size_names) - 1:
        size_bytes /= 1024.0
        i += 1

    return f"{size_bytes:.1f} {size_names[i]}"


def format_timestamp(timestamp: float) -> str:
    """타임스탬프를 읽기 쉬운 날짜/시간 형태로 변환"""
    return time.strftime("%Y-%m-%d %H:%M:%S", time.localtime(timestamp))

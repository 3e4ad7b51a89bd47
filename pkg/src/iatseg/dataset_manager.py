"""
데이터셋 생성 관리 클래스
scene seed 구간을 스레드별로 나누어 생성하고 진행률/상태를 추적
"""

import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Tuple

from .data import SceneConfig, read_manifest, write_manifest, write_scenes
from .logs import get_logger
from .utils import ensure_writable_directory, format_duration, get_human_readable_size

logger = get_logger(__name__)

ProgressCallback = Callable[[int, int, str], None]
StatusCallback = Callable[[str], None]
CompletionCallback = Callable[[bool], None]


def shard_ranges(total: int, workers: int) -> List[Tuple[int, int]]:
    """Contiguous [start, stop) index ranges, one per worker (empty ones omitted)."""
    workers = max(1, min(workers, total)) if total else 1
    base, extra = divmod(total, workers)
    ranges, start = [], 0
    for i in range(workers):
        stop = start + base + (1 if i < extra else 0)
        if stop > start:
            ranges.append((start, stop))
        start = stop
    return ranges


def directory_size(path: str) -> int:
    total = 0
    for name in os.listdir(path):
        full = os.path.join(path, name)
        if os.path.isfile(full):
            total += os.path.getsize(full)
    return total


class GenerationCancelled(Exception):
    """취소 요청으로 생성이 중단됨"""


class DatasetManager:
    """합성 데이터셋 생성을 관리하고 진행률을 추적하는 클래스"""

    def __init__(self, cfg: Optional[SceneConfig] = None, workers: int = 4):
        self.cfg = cfg or SceneConfig()
        self.workers = max(1, int(workers))
        self.jobs: Dict[int, Dict[str, Any]] = {}
        self.job_status: Dict[str, str] = {}
        self._cancel_events: Dict[str, threading.Event] = {}
        self._lock = threading.Lock()

    def generate(self, directory: str, scenes: int, seed: int,
                 progress_callback: Optional[ProgressCallback] = None,
                 status_callback: Optional[StatusCallback] = None,
                 cancel_event: Optional[threading.Event] = None) -> Tuple[bool, str]:
        """장면 생성 실행 -> (성공 여부, 메시지)"""

        def status_wrapper(message: str):
            logger.debug(message)
            if status_callback:
                status_callback(message)

        if scenes < 0:
            return False, f"scene count must be nonnegative, got {scenes}"
        ok, message = ensure_writable_directory(directory)
        if not ok:
            status_wrapper(f"❌ {message}")
            return False, message

        started = time.monotonic()
        ranges = shard_ranges(scenes, self.workers)
        status_wrapper(f"생성 시작: {scenes} scenes, seed {seed}, {len(ranges)} shard(s)")
        done = [0]

        def run_shard(start: int, stop: int) -> List[Dict[str, Any]]:
            entries: List[Dict[str, Any]] = []
            for index in range(start, stop):
                if cancel_event is not None and cancel_event.is_set():
                    raise GenerationCancelled()
                entries.extend(write_scenes(directory, seed, index, index + 1, self.cfg))
                with self._lock:
                    done[0] += 1
                    count = done[0]
                if progress_callback:
                    progress_callback(count, scenes, "생성 중...")
            return entries

        try:
            with ThreadPoolExecutor(max_workers=max(1, len(ranges))) as pool:
                futures = [pool.submit(run_shard, start, stop) for start, stop in ranges]
                entries = [entry for future in futures for entry in future.result()]
        except GenerationCancelled:
            status_wrapper("⚠️ 생성 취소됨")
            return False, "cancelled"
        except OSError as e:
            status_wrapper(f"❌ 생성 실패: {e}")
            return False, str(e)

        write_manifest(directory, seed, self.cfg, entries)
        read_manifest(directory)
        elapsed = format_duration(time.monotonic() - started)
        size = get_human_readable_size(directory_size(directory))
        message = f"{scenes} scenes written to {directory} ({size}, {elapsed})"
        status_wrapper(f"✅ 생성 완료: {message}")
        return True, message

    def generate_async(self, directory: str, scenes: int, seed: int,
                       progress_callback: Optional[ProgressCallback] = None,
                       status_callback: Optional[StatusCallback] = None,
                       completion_callback: Optional[CompletionCallback] = None) -> str:
        """비동기 장면 생성; 작업 ID 반환"""
        cancel_event = threading.Event()
        ready = threading.Event()

        def generate_worker():
            ready.wait()
            job_id = str(threading.current_thread().ident)
            success, _ = self.generate(directory, scenes, seed, progress_callback, status_callback, cancel_event)
            with self._lock:
                if self.job_status.get(job_id) != "cancelled":
                    self.job_status[job_id] = "completed" if success else "failed"
            if completion_callback:
                completion_callback(success)

        thread = threading.Thread(target=generate_worker, daemon=True)
        thread.start()
        job_id = str(thread.ident)
        with self._lock:
            self.jobs[thread.ident] = {
                "directory": directory,
                "scenes": scenes,
                "seed": seed,
                "thread": thread,
            }
            self._cancel_events[job_id] = cancel_event
        ready.set()
        return job_id

    def cancel_generation(self, job_id: str) -> bool:
        """생성 취소 (진행 중인 장면은 끝까지 쓰고 멈춤)"""
        with self._lock:
            event = self._cancel_events.get(job_id)
            if event is None:
                return False
            self.job_status[job_id] = "cancelled"
        event.set()
        return True

    def wait(self, job_id: str, timeout: Optional[float] = None) -> bool:
        """작업이 끝날 때까지 대기; 끝났으면 True"""
        try:
            info = self.jobs[int(job_id)]
        except (KeyError, ValueError):
            return False
        info["thread"].join(timeout)
        return not info["thread"].is_alive()

    def get_job_status(self, job_id: str) -> Dict[str, Any]:
        """생성 작업 상태 조회"""
        try:
            info = self.jobs[int(job_id)]
        except (KeyError, ValueError):
            return {}
        return {
            "directory": info["directory"],
            "scenes": info["scenes"],
            "seed": info["seed"],
            "is_alive": info["thread"].is_alive(),
            "status": self.job_status.get(job_id, "running"),
        }

    def get_active_jobs(self) -> List[Dict[str, Any]]:
        """활성 작업 목록 조회"""
        return [{"job_id": str(ident), "directory": info["directory"], "scenes": info["scenes"]}
                for ident, info in list(self.jobs.items()) if info["thread"].is_alive()]

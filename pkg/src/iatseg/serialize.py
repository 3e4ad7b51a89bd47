"""
텐서/체크포인트 직렬화
IATW 바이너리 텐서 포맷과 이름 붙은 텐서 묶음(체크포인트) 컨테이너
"""

import io
import json
import struct
from typing import IO, Any, Dict, Tuple, Union

import numpy as np

from .errors import CheckpointError, DataError
from .tensor import Tensor

TENSOR_MAGIC = b"IATW"
TENSOR_VERSION = 1
CHECKPOINT_MAGIC = b"IATC"
CHECKPOINT_VERSION = 1

ArrayLike = Union[Tensor, np.ndarray]


def _as_array(value: ArrayLike) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def write_tensor(stream: IO[bytes], value: ArrayLike) -> None:
    """magic "IATW", version u32, rank u32, dims u64[rank], payload f64[] (little-endian)"""
    array = _as_array(value)
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<II", TENSOR_VERSION, array.ndim))
    if array.ndim:
        stream.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    stream.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_exact(stream: IO[bytes], count: int, what: str) -> bytes:
    data = stream.read(count)
    if len(data) != count:
        raise DataError(f"truncated tensor file while reading {what}")
    return data


def read_tensor(stream: IO[bytes]) -> np.ndarray:
    magic = _read_exact(stream, 4, "magic")
    if magic != TENSOR_MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", _read_exact(stream, 8, "header"))
    if version != TENSOR_VERSION:
        raise DataError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{rank}Q", _read_exact(stream, 8 * rank, "dims")) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(stream, 8 * count, "payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def save_tensor(path: str, value: ArrayLike) -> None:
    with open(path, "wb") as f:
        write_tensor(f, value)


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        array = read_tensor(f)
        if f.read(1):
            raise DataError(f"trailing bytes after tensor in {path}")
    return array


def tensor_to_bytes(value: ArrayLike) -> bytes:
    buffer = io.BytesIO()
    write_tensor(buffer, value)
    return buffer.getvalue()


# --- 체크포인트 ---

def save_checkpoint(path: str, tensors: Dict[str, ArrayLike], metadata: Dict[str, Any]) -> None:
    """IATC 헤더 + (이름, IATW 텐서) 레코드들 + JSON 메타데이터"""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, value in tensors.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            write_tensor(f, value)
        meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        with open(path, "rb") as f:
            if f.read(4) != CHECKPOINT_MAGIC:
                raise CheckpointError(f"not a checkpoint file: {path}")
            version, count = struct.unpack("<II", _read_exact(f, 8, "checkpoint header"))
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            tensors: Dict[str, np.ndarray] = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
                name = _read_exact(f, name_len, "name").decode("utf-8")
                tensors[name] = read_tensor(f)
            (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
            metadata = json.loads(_read_exact(f, meta_len, "metadata").decode("utf-8"))
    except (OSError, DataError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return tensors, metadata

"""
Tensor Container and Cache
==========================

Little-endian binary container for named tensors, used for the parsed-dataset
cache and for model checkpoints, plus a thread-safe cache manager that serves
tensors from memory, then disk, then a loader callback.

Container layout:
    magic b"LLBC" | u16 version | u32 descriptor length | UTF-8 JSON descriptor
    | u16 tensor count | per tensor: u16 name length, name, u8 dtype code,
    u8 rank, rank x u32 dims, raw little-endian payload
"""

import io
import json
import logging
import os
import struct
import threading
import time
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from errors import ContainerError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b"LLBC"
VERSION = 1

DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i8"),
}
_CODE_FOR = {np.dtype(dt).newbyteorder("=").str: code for code, dt in DTYPE_CODES.items()}

Tensors = Dict[str, np.ndarray]


def _dtype_code(array: np.ndarray) -> int:
    key = array.dtype.newbyteorder("=").str
    if key not in _CODE_FOR:
        raise ShapeError(f"dtype {array.dtype} cannot be stored in a tensor container")
    return _CODE_FOR[key]


def encode_container(tensors: Tensors, descriptor: Optional[dict] = None) -> bytes:
    buf = io.BytesIO()
    desc = json.dumps(descriptor or {}, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(desc)))
    buf.write(desc)
    buf.write(struct.pack("<H", len(tensors)))
    for name, array in tensors.items():
        array = np.asarray(array)
        code = _dtype_code(array)
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", code, array.ndim))
        buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buf.write(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes())
    return buf.getvalue()


def decode_container(data: bytes, source: str = "<bytes>") -> Tuple[Tensors, dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError(f"{source}: truncated container at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerError(f"{source}: bad magic, not a tensor container")
    version, desc_len = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise ContainerError(f"{source}: unsupported container version {version}")
    try:
        descriptor = json.loads(bytes(take(desc_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{source}: unreadable descriptor: {e}") from e

    (count,) = struct.unpack("<H", take(2))
    tensors: Tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in DTYPE_CODES:
            raise ContainerError(f"{source}: unknown dtype code {code} for '{name}'")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = DTYPE_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = np.frombuffer(take(nbytes), dtype=dtype).reshape(dims)
        tensors[name] = payload.astype(dtype.newbyteorder("="), copy=True)
    if pos != len(view):
        raise ContainerError(f"{source}: {len(view) - pos} trailing bytes")
    return tensors, descriptor


def write_container(path: Union[str, Path], tensors: Tensors, descriptor: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(encode_container(tensors, descriptor))
    os.replace(tmp, path)


def read_container(path: Union[str, Path]) -> Tuple[Tensors, dict]:
    path = Path(path)
    if not path.is_file():
        raise ContainerError(f"container not found: {path}")
    return decode_container(path.read_bytes(), str(path))


class TensorCache:
    """
    Memory + disk cache of named tensor groups.

    Lookups go memory -> ``<cache_dir>/<key>.llbc`` -> ``loader()``; a loader
    result is written back to disk so later processes skip parsing.
    """

    def __init__(self, cache_dir: Optional[Union[str, Path]] = None, max_entries: int = 8):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.max_entries = max_entries
        self._memory: "OrderedDict[str, Tuple[Tensors, dict]]" = OrderedDict()
        self._stats = {
            'requests': 0,
            'memory_hits': 0,
            'disk_loads': 0,
            'loader_calls': 0,
            'disk_writes': 0,
            'total_load_time': 0.0,
        }
        self._lock = threading.RLock()

    def _disk_path(self, key: str) -> Optional[Path]:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{key}.llbc"

    def _remember(self, key: str, entry: Tuple[Tensors, dict]) -> None:
        self._memory[key] = entry
        self._memory.move_to_end(key)
        while len(self._memory) > self.max_entries:
            evicted, _ = self._memory.popitem(last=False)
            logger.debug(f"Evicted {evicted} from tensor cache")

    def get_or_load(self, key: str, loader: Callable[[], Tuple[Tensors, dict]]) -> Tuple[Tensors, dict]:
        with self._lock:
            self._stats['requests'] += 1
            if key in self._memory:
                self._stats['memory_hits'] += 1
                self._memory.move_to_end(key)
                return self._memory[key]

            start = time.time()
            path = self._disk_path(key)
            entry = None
            if path is not None and path.is_file():
                try:
                    entry = read_container(path)
                    self._stats['disk_loads'] += 1
                except ContainerError as e:
                    logger.warning(f"Ignoring unreadable cache file {path}: {e}")
            if entry is None:
                entry = loader()
                self._stats['loader_calls'] += 1
                if path is not None:
                    write_container(path, *entry)
                    self._stats['disk_writes'] += 1
            elapsed = time.time() - start
            self._stats['total_load_time'] += elapsed
            size = sum(t.nbytes for t in entry[0].values())
            logger.info(f"📁 Loaded {key}: {size:,} bytes in {elapsed:.3f}s")
            self._remember(key, entry)
            return entry

    def invalidate(self, key: str) -> None:
        with self._lock:
            self._memory.pop(key, None)
            path = self._disk_path(key)
            if path is not None and path.exists():
                path.unlink()

    def clear(self) -> None:
        with self._lock:
            self._memory.clear()

    def stats(self) -> dict:
        with self._lock:
            return dict(self._stats, entries=len(self._memory))

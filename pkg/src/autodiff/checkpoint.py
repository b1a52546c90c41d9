"""CDM1 checkpoint files.

Layout (little-endian): b"CDM1", version u32, entry count u32, optimizer step
u64, then per entry: name length u32, UTF-8 name, rank u32, dims u64 x rank,
f32 data. Adam moments are stored as extra entries under the `@m/` and `@v/`
prefixes.
"""
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from src.autodiff.optim import ParamStore
from src.utils.errors import FormatError
from src.utils.logger import get_logger

logger = get_logger("checkpoint")

MAGIC = b"CDM1"
VERSION = 1
FIRST_MOMENT_PREFIX = "@m/"
SECOND_MOMENT_PREFIX = "@v/"
_DATA_DTYPE = np.dtype("<f4")


def _entries(store: ParamStore) -> Dict[str, np.ndarray]:
    entries = dict(store.arrays())
    for name in store.names():
        entries[FIRST_MOMENT_PREFIX + name] = store.first_moment[name]
        entries[SECOND_MOMENT_PREFIX + name] = store.second_moment[name]
    return entries


def encode_checkpoint(store: ParamStore) -> bytes:
    entries = _entries(store)
    chunks = [MAGIC, struct.pack("<IIQ", VERSION, len(entries), store.step)]
    for name, array in entries.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=_DATA_DTYPE).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise FormatError("checkpoint truncated", {"offset": self.offset, "wanted": size})
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(payload: bytes, dtype: str = "float32") -> ParamStore:
    reader = _Reader(payload)
    if reader.take(4) != MAGIC:
        raise FormatError("not a CDM1 checkpoint")
    version, count, step = reader.unpack("<IIQ")
    if version != VERSION:
        raise FormatError("unsupported checkpoint version", {"version": version})
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as error:
            raise FormatError("checkpoint entry name is not UTF-8") from error
        (rank,) = reader.unpack("<I")
        dims = reader.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(reader.take(size * _DATA_DTYPE.itemsize), dtype=_DATA_DTYPE)
        arrays[name] = data.reshape(dims)
    if reader.offset != len(payload):
        raise FormatError("trailing bytes after checkpoint entries", {"offset": reader.offset})

    store = ParamStore(dtype)
    for name, array in arrays.items():
        if name.startswith((FIRST_MOMENT_PREFIX, SECOND_MOMENT_PREFIX)):
            continue
        store.add(name, array)
        store.first_moment[name] = np.array(arrays.get(FIRST_MOMENT_PREFIX + name, np.zeros_like(array)), dtype=store.dtype)
        store.second_moment[name] = np.array(arrays.get(SECOND_MOMENT_PREFIX + name, np.zeros_like(array)), dtype=store.dtype)
    store.step = step
    return store


def save_checkpoint(path: Union[str, Path], store: ParamStore) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(store))
    logger.debug(f"Saved checkpoint {path} at step {store.step}")


def load_checkpoint(path: Union[str, Path], dtype: str = "float32") -> ParamStore:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except FileNotFoundError as error:
        raise FormatError(f"checkpoint not found: {path}", {"path": str(path)}) from error
    return decode_checkpoint(payload, dtype)

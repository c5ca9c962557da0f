"""Binary checkpoint files for named parameter sets.

Layout (little-endian): magic ``TFCK``, format version u32, parameter count
u32, then per parameter: name length u32, UTF-8 name, rank u32, one u32 per
dimension, and the data as raw 32-bit floats in row-major order.
"""

import io
import struct

import numpy as np

from .errors import DataFormatError
from .fileio import atomic_write_bytes
from .tensor import Tensor

MAGIC = b"TFCK"
FORMAT_VERSION = 1


def checkpoint_bytes(params: dict) -> bytes:
    """Serialize name -> Tensor/ndarray in the dict's iteration order."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(params)))
    for name, value in params.items():
        arr = np.ascontiguousarray(
            value.data if isinstance(value, Tensor) else value, dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(params: dict, path: str) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params))


def load_checkpoint(path: str) -> dict:
    """Read a checkpoint into an ordered name -> float32 ndarray dict."""
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:4] != MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != FORMAT_VERSION:
            raise DataFormatError(f"{path}: unsupported format version {version}")
        offset = 12
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", view, offset)
            offset += 4
            name = bytes(view[offset:offset + name_len]).decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", view, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", view, offset)
            offset += 4 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            data = np.frombuffer(view, dtype="<f4", count=n, offset=offset)
            offset += 4 * n
            params[name] = data.reshape(dims).copy()
    except struct.error as exc:
        raise DataFormatError(f"{path}: truncated checkpoint ({exc})") from exc
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return params

"""Binary tensor file format used by every module that touches disk.

Layout: magic ``LSLP``, format version u8 (=1), dtype code u8 (1 = float32),
rank u8, then rank little-endian u32 dims, then the row-major float32
payload, little-endian. Round-trips are bit-exact.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"LSLP"
FORMAT_VERSION = 1
DTYPE_F32 = 1

_HEADER = struct.Struct("<4sBBB")


def save_tensor(path, array: np.ndarray) -> None:
    """Write ``array`` as a float32 tensor file. Values must be finite."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim < 1:
        arr = arr.reshape(1)
    if not np.isfinite(arr).all():
        raise DataError(f"refusing to write non-finite tensor to {path}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f4", copy=False).tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a tensor file back into a float32 array."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated tensor file")
    magic, version, dtype, rank = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    if dtype != DTYPE_F32:
        raise DataError(f"{path}: unsupported dtype code {dtype}")
    offset = _HEADER.size
    dims_end = offset + 4 * rank
    if len(raw) < dims_end:
        raise DataError(f"{path}: truncated dimension header")
    shape = struct.unpack(f"<{rank}I", raw[offset:dims_end])
    count = int(np.prod(shape)) if rank else 1
    payload = raw[dims_end:]
    if len(payload) != 4 * count:
        raise DataError(
            f"{path}: payload holds {len(payload) // 4} values, header says {count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)

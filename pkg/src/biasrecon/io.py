"""Bit-exact file formats: binary array container, canonical JSON, PNG export.

The array container is the data plane for every artifact (images, fields,
k-space, network weights): a 4-byte magic "BRC1", a dtype code byte
(0 = float64, 1 = complex128 interleaved), an ndim byte, little-endian
u32 dims, then the row-major little-endian IEEE-754 payload. Round trips
are bit-identical regardless of host endianness. JSON is the control
plane; PNG export is 8-bit windowed visualisation only, never an input.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = ["write_array", "read_array", "write_json", "read_json", "write_png"]

MAGIC = b"BRC1"
_DTYPE_F64 = 0
_DTYPE_C128 = 1


def write_array(path: str | Path, arr: np.ndarray) -> None:
    """Serialise a real or complex array to the container format."""
    a = np.asarray(arr)
    if a.dtype.kind == "c":
        code, a = _DTYPE_C128, np.ascontiguousarray(a, dtype="<c16")
    elif a.dtype.kind in "fiub":
        code, a = _DTYPE_F64, np.ascontiguousarray(a, dtype="<f8")
    else:
        raise ValueError(f"unsupported dtype {a.dtype}")
    if a.ndim < 1 or a.ndim > 255:
        raise ValueError(f"unsupported ndim {a.ndim}")
    header = MAGIC + struct.pack("<BB", code, a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes(order="C"))


def read_array(path: str | Path) -> np.ndarray:
    """Read a container file back into a float64 or complex128 array."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    dims = struct.unpack_from(f"<{ndim}I", raw, 6)
    offset = 6 + 4 * ndim
    if code == _DTYPE_F64:
        dtype, itemsize = "<f8", 8
    elif code == _DTYPE_C128:
        dtype, itemsize = "<c16", 16
    else:
        raise ValueError(f"{path}: unknown dtype code {code}")
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    expected = offset + count * itemsize
    if len(raw) != expected:
        raise ValueError(f"{path}: payload length {len(raw) - offset}, expected {count * itemsize}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims)
    return arr.astype(np.complex128 if code == _DTYPE_C128 else np.float64)


def write_json(path: str | Path, obj) -> None:
    """Canonical JSON: sorted keys, fixed indentation, trailing newline."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def write_png(path: str | Path, img: np.ndarray, window: tuple[float, float]) -> None:
    """8-bit grayscale export of a real image clipped to [lo, hi]."""
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise ValueError(f"bad window ({lo}, {hi})")
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("PNG export expects a 2D real image")
    scaled = np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    Image.fromarray(np.round(255.0 * scaled).astype(np.uint8), mode="L").save(Path(path))

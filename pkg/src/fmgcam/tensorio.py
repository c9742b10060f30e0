"""Binary container for saliency tensors.

Layout (all integers little-endian)::

    offset  size      field
    0       4         magic b"FMGT"
    4       1         format version (1)
    5       1         dtype code: 1 = float32, 2 = float64
    6       1         ndim
    7       1         reserved (0)
    8       4         uint32 length M of the metadata block
    12      4*ndim    uint32 dimensions
    ...     M         UTF-8 JSON metadata (sorted keys)
    ...     ...       row-major payload, little-endian floats

Metadata records the saliency type (``class`` or ``fused``), class ids and
pipeline stage so a file round-trips to the same object.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

from .cam import ClassSaliency, FusedSaliency
from .errors import ParameterError

MAGIC = b"FMGT"
VERSION = 1
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


def write_tensor(path, array: np.ndarray, meta: dict | None = None) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    header = struct.pack("<4sBBBBI", MAGIC, VERSION, _CODES[arr.dtype], arr.ndim, 0, len(meta_bytes))
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(header + dims + meta_bytes + payload)


def read_tensor(path) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise ParameterError(f"{path}: truncated tensor file")
    magic, version, code, ndim, _, meta_len = struct.unpack_from("<4sBBBBI", data, 0)
    if magic != MAGIC or version != VERSION or code not in _DTYPES:
        raise ParameterError(f"{path}: not an FMGT v{VERSION} tensor file")
    dims = struct.unpack_from(f"<{ndim}I", data, 12)
    off = 12 + 4 * ndim
    meta = json.loads(data[off : off + meta_len].decode("utf-8"))
    off += meta_len
    dtype = _DTYPES[code].newbyteorder("<")
    count = int(np.prod(dims)) if ndim else 1
    if len(data) - off != count * dtype.itemsize:
        raise ParameterError(f"{path}: payload size does not match header")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), meta


def save_saliency(path, saliency: ClassSaliency | FusedSaliency) -> None:
    if isinstance(saliency, FusedSaliency):
        meta = {"type": "fused", "class_ids": list(saliency.class_ids), "stage": saliency.stage}
        write_tensor(path, saliency.channels, meta)
    elif isinstance(saliency, ClassSaliency):
        meta = {"type": "class", "class_id": saliency.class_id}
        write_tensor(path, saliency.values, meta)
    else:
        raise ParameterError(f"cannot serialise {type(saliency).__name__}")


def load_saliency(path) -> ClassSaliency | FusedSaliency:
    arr, meta = read_tensor(path)
    if meta.get("type") == "fused":
        return FusedSaliency(arr, tuple(meta["class_ids"]), meta["stage"])
    if meta.get("type") == "class":
        return ClassSaliency(arr, meta.get("class_id"))
    raise ParameterError(f"{path}: unknown saliency type {meta.get('type')!r}")


def export_png16(path, saliency: ClassSaliency | FusedSaliency) -> None:
    """16-bit grayscale PNG for inspection; fused channels are tiled left to right.

    Values are mapped linearly from [lo, hi] to [0, 65535]; lo and hi are
    stored as PNG text chunks so the mapping can be inverted.
    """
    if isinstance(saliency, FusedSaliency):
        arr = np.concatenate([saliency.channel(k) for k in range(saliency.K)], axis=1)
    else:
        arr = saliency.values
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    img = Image.fromarray(np.round(scaled * 65535).astype(np.uint16))
    info = PngImagePlugin.PngInfo()
    info.add_text("fmgcam:lo", repr(lo))
    info.add_text("fmgcam:hi", repr(hi))
    img.save(path, format="PNG", pnginfo=info)

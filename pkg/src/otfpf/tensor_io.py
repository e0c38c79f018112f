"""Tensor file format used repo-wide.

A tensor ``<name>`` is stored as two sibling files:

* ``<name>.json`` - UTF-8 header ``{"dtype": "f32", "shape": [...], "order": "row-major"}``
* ``<name>.bin``  - raw little-endian 32-bit reals in row-major order
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import DataError

_HEADER_DTYPE = "f32"
_HEADER_ORDER = "row-major"


def _strip_suffix(path: str | os.PathLike) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p


def save_tensor(path: str | os.PathLike, array: np.ndarray) -> tuple[Path, Path]:
    """Write ``array`` as ``<path>.json`` + ``<path>.bin``; returns both paths."""
    base = _strip_suffix(path)
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float32))
    header = {"dtype": _HEADER_DTYPE, "shape": list(arr.shape), "order": _HEADER_ORDER}
    json_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(header) + "\n", encoding="utf-8")
    bin_path.write_bytes(arr.astype("<f4").tobytes())
    return json_path, bin_path


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    """Read a tensor stored by :func:`save_tensor`."""
    base = _strip_suffix(path)
    json_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    if not json_path.exists():
        raise DataError(f"tensor header not found: {json_path}")
    if not bin_path.exists():
        raise DataError(f"tensor payload not found: {bin_path}")
    try:
        header = json.loads(json_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed tensor header {json_path}: {exc}") from exc
    if header.get("dtype") != _HEADER_DTYPE or header.get("order") != _HEADER_ORDER:
        raise DataError(f"unsupported tensor header in {json_path}: {header}")
    shape = tuple(int(s) for s in header.get("shape", ()))
    if any(s < 1 for s in shape):
        raise DataError(f"invalid shape {shape} in {json_path}")
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    expected = int(np.prod(shape)) if shape else 1
    if raw.size != expected:
        raise DataError(
            f"tensor payload {bin_path} holds {raw.size} values, header expects {expected}"
        )
    return raw.reshape(shape).astype(np.float32)

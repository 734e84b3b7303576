"""Dense tensor helpers.

Tensors are plain C-contiguous numpy arrays of ``float32`` (training) or
``float64`` (gradient verification). The helpers here enforce the few
whole-tensor contracts the rest of the engine relies on.
"""
from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError

SINGLE = np.float32
DOUBLE = np.float64
FLOAT_TYPES = (SINGLE, DOUBLE)


def as_tensor(values, dtype=SINGLE) -> np.ndarray:
    """Copy ``values`` into a row-major tensor of ``dtype``."""
    if np.dtype(dtype).type not in FLOAT_TYPES:
        raise DomainError(f"unsupported precision {np.dtype(dtype)}")
    out = np.array(values, dtype=dtype, order="C")
    if out.ndim == 0:
        out = out.reshape(1)
    if out.size == 0 or any(d < 1 for d in out.shape):
        raise ShapeError(f"tensor dims must all be >= 1, got {list(out.shape)}")
    check_finite(out)
    return out


def zeros(dims, dtype=SINGLE) -> np.ndarray:
    return np.zeros(tuple(dims), dtype=dtype)


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise DomainError(f"{what} contains non-finite values")
    return t


def elementwise_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Add two tensors of identical dims."""
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_sum dims differ: {list(a.shape)} vs {list(b.shape)}")
    return a + b


def argmax(v: np.ndarray) -> int:
    """Index of the largest entry of a rank-1 tensor; ties go to the lowest index."""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ShapeError(f"argmax expects rank 1, got dims {list(v.shape)}")
    if v.size == 0:
        raise DomainError("argmax of an empty tensor")
    # np.argmax returns the first occurrence of the maximum.
    return int(np.argmax(v))

"""Software bfloat16: 1 sign bit, 8 exponent bits, 7 mantissa bits.

Values are kept in float32 containers; rounding clears the low 16 bits of the
float32 pattern using round-to-nearest-even on bit 16.
"""
from __future__ import annotations

import numpy as np

_LOW_MASK = np.uint32(0xFFFF0000)
_QUIET_BIT = np.uint32(0x00400000)


def bf16_round(x):
    """Round to the nearest bfloat16 value, ties to even, widened back to float32.

    Accepts a Python scalar or an array; scalars come back as ``np.float32``.
    Infinities pass through, NaN stays NaN (sign kept, quiet bit set), and
    finite values past the largest bfloat16 overflow to infinity exactly as
    round-to-nearest-even dictates.
    """
    arr = np.asarray(x, dtype=np.float32)
    scalar = arr.ndim == 0
    arr = arr.reshape(-1) if scalar else arr
    bits = arr.view(np.uint32)
    lsb = (bits >> np.uint32(16)) & np.uint32(1)
    rounded = (bits + np.uint32(0x7FFF) + lsb) & _LOW_MASK
    nan = np.isnan(arr)
    if np.any(nan):
        rounded = np.where(nan, (bits & _LOW_MASK) | _QUIET_BIT, rounded)
    out = rounded.astype(np.uint32).view(np.float32)
    if scalar:
        return np.float32(out[0])
    return out


def bf16_round_like(x: np.ndarray) -> np.ndarray:
    """bf16_round that keeps the container dtype of ``x`` (f32 or f64)."""
    return bf16_round(x).astype(x.dtype, copy=False)


def is_bf16_exact(x) -> np.ndarray:
    """True where the value is a fixed point of bf16_round (NaN counts as exact)."""
    arr = np.asarray(x, dtype=np.float32)
    r = bf16_round(arr)
    return (r.view(np.uint32) == arr.view(np.uint32)) | np.isnan(arr) | (arr == r)

"""Linear attention biases: per-head slopes and the symmetric distance penalty.

The encoder is bidirectional, so the penalty uses |i - j| on both sides of the
diagonal.  Biases are static, so full [heads, L, L] stacks are cached.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class AlibiSlopes:
    n_heads: int
    slopes: tuple[float, ...]

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.asarray(self.slopes, dtype=dtype)

    def __len__(self) -> int:
        return self.n_heads

    def __getitem__(self, h: int) -> float:
        return self.slopes[h]


@dataclass(frozen=True)
class AlibiBias:
    length: int
    slope: float
    bias: np.ndarray


def alibi_slopes(n_heads: int) -> AlibiSlopes:
    """Geometric slopes 2^(-8h/n) for h = 1..n."""
    if n_heads < 1:
        raise ConfigError(f"n_heads must be >= 1, got {n_heads}")
    return AlibiSlopes(n_heads, tuple(2.0 ** (-8.0 * (h + 1) / n_heads) for h in range(n_heads)))


def distance_matrix(rows: int | np.ndarray, cols: int | np.ndarray) -> np.ndarray:
    """|i - j| for query positions ``rows`` and key positions ``cols``."""
    i = np.arange(rows) if np.isscalar(rows) else np.asarray(rows)
    j = np.arange(cols) if np.isscalar(cols) else np.asarray(cols)
    return np.abs(i[:, None] - j[None, :]).astype(np.float64)


def alibi_bias(length: int, slope: float) -> AlibiBias:
    if length < 1:
        raise ConfigError(f"sequence length must be >= 1, got {length}")
    bias = -slope * distance_matrix(length, length)
    bias.setflags(write=False)
    return AlibiBias(length, float(slope), bias)


def extend_bias(train_len: int, eval_len: int, slope: float) -> AlibiBias:
    """Bias for a longer (or shorter) evaluation length.

    Nothing is learned, so extrapolation is just a larger matrix; the leading
    ``train_len`` block is the training bias.  ``train_len`` is informational.
    """
    return alibi_bias(eval_len, slope)


@lru_cache(maxsize=64)
def _bias_stack(length: int, n_heads: int) -> np.ndarray:
    slopes = alibi_slopes(n_heads).as_array()
    stack = -slopes[:, None, None] * distance_matrix(length, length)[None]
    stack.setflags(write=False)
    return stack


def alibi_bias_stack(length: int, n_heads: int) -> np.ndarray:
    """Read-only cached [n_heads, L, L] bias for the standard slope sequence."""
    if length < 1:
        raise ConfigError(f"sequence length must be >= 1, got {length}")
    return _bias_stack(int(length), int(alibi_slopes(n_heads).n_heads))


def bias_for_slopes(length: int, slopes: AlibiSlopes | np.ndarray) -> np.ndarray:
    s = slopes.as_array() if isinstance(slopes, AlibiSlopes) else np.asarray(slopes, dtype=np.float64)
    if isinstance(slopes, AlibiSlopes) and slopes == alibi_slopes(slopes.n_heads):
        return alibi_bias_stack(length, slopes.n_heads)
    return -s[:, None, None] * distance_matrix(length, length)[None]

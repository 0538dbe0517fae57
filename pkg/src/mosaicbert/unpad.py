"""Padded <-> packed conversion.

A packed batch concatenates the real tokens of every row into one stream and
records row boundaries in ``cu_seqlens`` (cumulative lengths, starting at 0).
Only right-padding is supported: real tokens must form a prefix of each row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSliceError, MaskLayoutError, PackingError
from .numerics import Tensor, gather_rows, scatter_rows


@dataclass
class PackedBatch:
    values: Tensor | np.ndarray  # [total_tokens, ...]
    cu_seqlens: np.ndarray
    max_seqlen: int
    orig_batch: int
    orig_len: int

    def __post_init__(self):
        self.cu_seqlens = np.asarray(self.cu_seqlens, dtype=np.int64)
        validate_cu_seqlens(self.cu_seqlens, self.orig_len, total=len(self.values))

    @property
    def total_tokens(self) -> int:
        return int(self.cu_seqlens[-1])

    @property
    def seqlens(self) -> np.ndarray:
        return np.diff(self.cu_seqlens)

    def segments(self):
        """(start, stop) offsets of every original row."""
        return list(zip(self.cu_seqlens[:-1].tolist(), self.cu_seqlens[1:].tolist()))

    def with_values(self, values) -> "PackedBatch":
        return PackedBatch(values, self.cu_seqlens, self.max_seqlen, self.orig_batch, self.orig_len)


def validate_cu_seqlens(cu: np.ndarray, orig_len: int | None = None, total: int | None = None) -> None:
    if cu.ndim != 1 or cu.size < 2:
        raise PackingError(f"cu_seqlens must be a vector of length >= 2, got shape {cu.shape}")
    if cu[0] != 0:
        raise PackingError(f"cu_seqlens must start at 0, got {cu[0]}")
    lens = np.diff(cu)
    if np.any(lens <= 0):
        raise PackingError(f"cu_seqlens must be strictly increasing: {cu.tolist()}")
    if orig_len is not None and np.any(lens > orig_len):
        raise PackingError(f"segment longer than orig_len={orig_len}: {lens.tolist()}")
    if total is not None and cu[-1] != total:
        raise PackingError(f"cu_seqlens ends at {cu[-1]} but the stream holds {total} tokens")


def check_mask(mask: np.ndarray) -> np.ndarray:
    """Validate a right-padded [B, L] mask; returns per-row lengths."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise MaskLayoutError(f"mask must be [B, L], got shape {mask.shape}")
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise DegenerateSliceError(f"rows {np.flatnonzero(lengths == 0).tolist()} have no real tokens")
    prefix = np.arange(mask.shape[1])[None, :] < lengths[:, None]
    if not np.array_equal(prefix, mask):
        bad = np.flatnonzero(np.any(prefix != mask, axis=1)).tolist()
        raise MaskLayoutError(f"rows {bad} have interior padding; only right-padding is supported")
    return lengths


def unpad_indices(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flat [B*L] indices of real tokens and the matching cu_seqlens."""
    lengths = check_mask(mask)
    idx = np.flatnonzero(np.asarray(mask, dtype=bool).reshape(-1))
    cu = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    return idx, cu


def unpad(batch: Tensor | np.ndarray, mask: np.ndarray) -> PackedBatch:
    mask = np.asarray(mask, dtype=bool)
    b, l = mask.shape
    if tuple(batch.shape[:2]) != (b, l):
        raise PackingError(f"batch shape {tuple(batch.shape)} does not match mask shape {mask.shape}")
    idx, cu = unpad_indices(mask)
    tail = tuple(batch.shape[2:])
    if isinstance(batch, Tensor):
        values = gather_rows(batch.reshape((b * l,) + tail), idx)
    else:
        values = np.asarray(batch).reshape((b * l,) + tail)[idx]
    return PackedBatch(values, cu, int(np.diff(cu).max()), b, l)


def pad(packed: PackedBatch) -> Tensor | np.ndarray:
    """Restore [B, L, ...] with exact zeros at padding positions."""
    cu = packed.cu_seqlens
    b, l = packed.orig_batch, packed.orig_len
    if cu.size != b + 1:
        raise PackingError(f"cu_seqlens has {cu.size - 1} segments but orig_batch is {b}")
    validate_cu_seqlens(cu, l, total=len(packed.values))
    lens = np.diff(cu)
    mask = np.arange(l)[None, :] < lens[:, None]
    idx = np.flatnonzero(mask.reshape(-1))
    vals = packed.values
    tail = tuple(vals.shape[1:])
    if isinstance(vals, Tensor):
        return scatter_rows(vals, idx, b * l).reshape((b, l) + tail)
    out = np.zeros((b * l,) + tail, dtype=np.asarray(vals).dtype)
    out[idx] = vals
    return out.reshape((b, l) + tail)


def mask_from_cu_seqlens(cu: np.ndarray, orig_len: int) -> np.ndarray:
    lens = np.diff(np.asarray(cu))
    return np.arange(orig_len)[None, :] < lens[:, None]


def padding_stats(mask: np.ndarray) -> dict[str, float]:
    """Fraction of padded positions; feedforward FLOPs are linear in tokens,
    so the saved fraction equals it."""
    mask = np.asarray(mask, dtype=bool)
    frac = float((~mask).sum()) / mask.size
    return {"pad_fraction": frac, "ff_flops_saved_fraction": frac}

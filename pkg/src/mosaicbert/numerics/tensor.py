"""Dense tensors with tape-based reverse-mode differentiation.

A ``Tape`` records every differentiable op executed while it is active (and
at least one input requires a gradient).  ``Tape.backward`` replays the records
in reverse order, accumulating gradients additively into ``Tensor.grad``.

Outside an active tape nothing is recorded, which doubles as inference mode.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from ..errors import DimensionError
from . import counters
from .bf16 import bf16_round


class DType(str, Enum):
    F32 = "f32"
    F64 = "f64"
    BF16 = "bf16"  # emulated: bf16 values in a float32 container

    @property
    def storage(self):
        return np.float64 if self is DType.F64 else np.float32


def result_dtype(*dtypes: DType) -> DType:
    """Promotion rule for elementwise ops: F64 wins, otherwise F32."""
    return DType.F64 if DType.F64 in dtypes else DType.F32


class Tensor:
    __slots__ = ("data", "dtype", "grad", "requires_grad", "name")

    def __init__(self, data, dtype: DType | str | None = None, requires_grad: bool = False, name: str | None = None):
        if dtype is None:
            arr = np.asarray(data)
            dtype = DType.F64 if arr.dtype == np.float64 else DType.F32
        dtype = DType(dtype)
        arr = np.array(data, dtype=dtype.storage, copy=True)
        if dtype is DType.BF16:
            arr = bf16_round(arr)
        self.data: np.ndarray = arr
        self.dtype = dtype
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, dtype: DType) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(data, dtype=dtype.storage)
        t.data = arr if arr.flags.c_contiguous else arr.copy()
        t.dtype = dtype
        t.grad = None
        t.requires_grad = False
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype: DType | str) -> "Tensor":
        return Tensor(self.data, dtype=dtype, requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        g = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.value}{g})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype: DType | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = DType.F64 if arr.dtype == np.float64 else DType.F32
    if dtype is DType.BF16:
        dtype = DType.F32
    return Tensor._wrap(arr, dtype)


# -- tape ---------------------------------------------------------------

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Backward
    name: str


_local = threading.local()


def _stack() -> list["Tape"]:
    s = getattr(_local, "tapes", None)
    if s is None:
        s = _local.tapes = []
    return s


def current_tape() -> "Tape | None":
    s = _stack()
    return s[-1] if s else None


class Tape:
    """Ordered log of differentiable ops. Confine each tape to one thread."""

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        s = _stack()
        if s and s[-1] is self:
            s.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.size != 1:
                raise DimensionError(f"backward needs a scalar loss or an explicit seed, got shape {loss.shape}")
            grad = np.ones(loss.shape, dtype=loss.dtype.storage)
        _accumulate(loss, np.asarray(grad))
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                _accumulate(inp, gi)
        # intermediate gradients are no longer needed; leaves keep theirs
        for rec in self.records:
            rec.output.grad = None if rec.output is not loss else rec.output.grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    store = np.float64 if t.dtype is DType.F64 else np.float32
    if g.shape != t.shape:
        g = unbroadcast(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=store, copy=True)
    else:
        t.grad += g


def make_op(out: np.ndarray, inputs: Sequence[Tensor], backward: Backward, dtype: DType, name: str = "") -> Tensor:
    """Wrap ``out`` as a Tensor and record ``backward`` on the active tape.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    result = Tensor._wrap(out, dtype)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.records.append(Record(tuple(inputs), result, backward, name))
    return result


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra < 0:
        return np.broadcast_to(g, shape).copy()
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise --------------------------------------------------------

def _pair(a, b) -> tuple[Tensor, Tensor, DType]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    return a, b, result_dtype(a.dtype, b.dtype)


def add(a, b) -> Tensor:
    a, b, dt = _pair(a, b)
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), dt, "add")


def sub(a, b) -> Tensor:
    a, b, dt = _pair(a, b)
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), dt, "sub")


def mul(a, b) -> Tensor:
    a, b, dt = _pair(a, b)
    out = a.data * b.data
    counters.count_multiplies(out.size)
    ad, bd = a.data, b.data
    return make_op(out, (a, b), lambda g: (g * bd, g * ad), dt, "mul")


def div(a, b) -> Tensor:
    a, b, dt = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_op(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)), dt, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,), result_dtype(x.dtype), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.log(xd), (x,), lambda g: (g / xd,), result_dtype(x.dtype), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_op(out, (x,), lambda g: (g * (1.0 - out * out),), result_dtype(x.dtype), "tanh")


# -- reductions and shape ops ------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_op(np.asarray(out), (x,), backward, result_dtype(x.dtype), "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), x.dtype, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), x.dtype, "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    shape, store = x.shape, x.data.dtype
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=store)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op(x.data[index], (x,), backward, x.dtype, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    dt = result_dtype(*(t.dtype for t in tensors))
    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, dt, "concat")


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``x[index]`` of a 2-D tensor; backward scatters additively."""
    index = np.asarray(index, dtype=np.int64)
    n, store = x.shape[0], x.data.dtype

    def backward(g):
        full = np.zeros((n,) + g.shape[1:], dtype=store)
        np.add.at(full, index, g)
        return (full,)

    return make_op(x.data[index], (x,), backward, x.dtype, "gather_rows")


def scatter_rows(x: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """Inverse of gather_rows for unique ``index``: zeros everywhere else."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_rows,) + x.shape[1:], dtype=x.data.dtype)
    out[index] = x.data
    return make_op(out, (x,), lambda g: (g[index],), x.dtype, "scatter_rows")


# -- matmul -------------------------------------------------------------

def matmul(a, b, bf16: bool = False) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims.

    If either operand is BF16-emulated (or ``bf16`` is set, the autocast
    case) both are bf16-rounded before the multiply and the product
    accumulates in float32.  Gradients pass straight through the rounding.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if bf16 or DType.BF16 in (a.dtype, b.dtype):
        ad = bf16_round(a.data)
        bd = bf16_round(b.data)
        dt = DType.F32
    else:
        dt = result_dtype(a.dtype, b.dtype)
        ad = a.data.astype(dt.storage, copy=False)
        bd = b.data.astype(dt.storage, copy=False)
    out = ad @ bd
    m, k = ad.shape[-2:]
    n = bd.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    counters.count_multiplies(batch * m * k * n)
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), a_shape)
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, b_shape)
        return ga, gb

    return make_op(out, (a, b), backward, dt, "matmul")

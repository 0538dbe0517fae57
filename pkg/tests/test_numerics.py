import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from mosaicbert.checks import bf16_reference
from mosaicbert.errors import DegenerateSliceError, DimensionError, EvaluationError
from mosaicbert.numerics import (
    DType,
    MultiplyCounter,
    Tape,
    Tensor,
    bf16_round,
    concat,
    cross_entropy,
    dropout,
    gather_rows,
    gelu,
    grad_check,
    is_bf16_exact,
    matmul,
    mse_loss,
    op_scope,
    scatter_rows,
    softmax_stable,
)
from mosaicbert.numerics.tensor import exp, log, tanh


def bits(x):
    return np.asarray(x, dtype=np.float32).view(np.uint32)


# -- bf16 ------------------------------------------------------------------

def test_bf16_examples():
    assert bf16_round(np.float32(1.0)) == 1.0
    assert bf16_round(np.float32(0.1)) == np.float32(0.10009765625)
    neg_zero = bf16_round(np.float32(-0.0))
    assert neg_zero == 0.0 and math.copysign(1.0, neg_zero) == -1.0
    assert math.isnan(bf16_round(np.float32("nan")))
    assert bf16_round(np.float32(np.inf)) == np.inf and bf16_round(np.float32(-np.inf)) == -np.inf


def test_bf16_ties_go_to_even():
    # 1 + 2^-8 sits halfway between 1 and 1 + 2^-7; the even neighbour is 1
    assert bf16_round(np.float32(1 + 2 ** -8)) == 1.0
    # 1 + 3 * 2^-8 sits halfway between 1 + 2^-7 (odd) and 1 + 2^-6 (even)
    assert bf16_round(np.float32(1 + 3 * 2 ** -8)) == np.float32(1 + 2 ** -6)


def test_bf16_overflow_rounds_to_inf():
    assert bf16_round(np.float32(3.4e38)) == np.inf
    assert bf16_round(np.float32(-3.4e38)) == -np.inf


def test_bf16_matches_reference_on_bit_patterns(rng):
    pats = rng.integers(0, 2 ** 32, size=20000, dtype=np.uint64).astype(np.uint32)
    x = pats.view(np.float32)
    got, ref = bits(bf16_round(x)), bits(bf16_reference(x))
    nan = np.isnan(x)
    assert np.array_equal(got[~nan], ref[~nan])
    assert np.isnan(bf16_round(x)[nan]).all()


def test_bf16_matches_ml_dtypes(rng):
    ml_dtypes = pytest.importorskip("ml_dtypes")
    x = rng.integers(0, 2 ** 32, size=50000, dtype=np.uint64).astype(np.uint32).view(np.float32)
    x = x[~np.isnan(x)]
    other = x.astype(ml_dtypes.bfloat16).astype(np.float32)
    assert np.array_equal(bits(bf16_round(x)), bits(other))


@given(st.floats(width=32, allow_nan=False))
def test_bf16_idempotent(v):
    once = bf16_round(np.float32(v))
    assert bits(bf16_round(once)) == bits(once)
    assert is_bf16_exact(once)


@given(st.floats(width=32, allow_nan=False, allow_infinity=False)
       .filter(lambda v: 1.1754944e-38 <= abs(v) <= 3.3e38))
def test_bf16_relative_error_half_ulp(v):
    r = float(bf16_round(np.float32(v)))
    assert abs(r - v) <= abs(v) * 2.0 ** -8


def test_bf16_tensor_holds_only_lattice_values(rng):
    t = Tensor(rng.normal(size=(5, 7)), DType.BF16)
    assert is_bf16_exact(t.data).all()


# -- matmul ----------------------------------------------------------------

def test_matmul_examples(rng):
    x = rng.normal(size=(3, 5))
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(x)).data, x)
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]
    assert not matmul(Tensor(np.zeros((2, 3))), Tensor(x[:3])).data.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_bf16_equals_f32_of_rounded_inputs(rng):
    a = rng.normal(size=(6, 9)).astype(np.float32)
    b = rng.normal(size=(9, 4)).astype(np.float32)
    got = matmul(Tensor(a, DType.BF16), Tensor(b))
    ref = bf16_round(a) @ bf16_round(b)
    assert got.data.dtype == np.float32
    assert np.array_equal(got.data, ref)
    assert np.array_equal(matmul(Tensor(a), Tensor(b), bf16=True).data, ref)


def test_dtype_promotion():
    a64, a32 = Tensor(np.ones(3)), Tensor(np.ones(3, dtype=np.float32))
    assert a64.dtype is DType.F64 and a32.dtype is DType.F32
    assert (a64 + a32).dtype is DType.F64
    assert (a32 * 2.0).dtype is DType.F32


# -- softmax / gelu ----------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(softmax_stable(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    assert np.allclose(softmax_stable(Tensor([1000.0, 1000.0])).data, 0.5)
    assert np.allclose(softmax_stable(Tensor([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_masked_entries_are_exact_zero():
    p = softmax_stable(Tensor([1.0, -np.inf, 2.0])).data
    assert p[1] == 0.0 and abs(p.sum() - 1) < 1e-12


def test_softmax_all_masked_row_raises():
    with pytest.raises(DegenerateSliceError):
        softmax_stable(Tensor([[0.0, 1.0], [-np.inf, -np.inf]]))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-1e3, 1e3))
def test_softmax_shift_invariant(xs, c):
    a = softmax_stable(Tensor(np.array(xs))).data
    b = softmax_stable(Tensor(np.array(xs) + c)).data
    assert np.max(np.abs(a - b)) <= 1e-7
    assert abs(a.sum() - 1) <= 1e-6


def test_gelu_examples():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(gelu(Tensor([10.0])).data[0] - 10.0) < 1e-6
    # Phi(1) via the independent ndtr routine
    assert abs(gelu(Tensor([1.0])).data[0] - ndtr(1.0)) < 1e-15
    assert abs(gelu(Tensor([1.0])).data[0] - 0.8413447460685429) < 1e-15


# -- autodiff ----------------------------------------------------------------

def test_grad_check_examples(rng):
    assert grad_check(lambda x: x * x, Tensor([3.0])) < 1e-8
    assert grad_check(lambda x: gelu(x).sum(), Tensor(rng.normal(size=4))) < 1e-6
    assert grad_check(lambda x: (x * 0.0).sum() + 5.0, Tensor(rng.normal(size=3))) == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_rejects_non_finite():
    with pytest.raises(EvaluationError):
        grad_check(lambda x: log(x).sum(), Tensor([-1.0]))


@pytest.mark.parametrize("name,fn", [
    ("add-broadcast", lambda a, b: (a + b[0]).sum()),
    ("mul", lambda a, b: (a * b).sum()),
    ("div", lambda a, b: (a / (b * b + 1.0)).sum()),
    ("sub-neg", lambda a, b: (-(a - b) * a).sum()),
    ("exp-log", lambda a, b: log(exp(a) + exp(b)).sum()),
    ("tanh", lambda a, b: tanh(a * b).sum()),
    ("matmul", lambda a, b: (matmul(a, b.T) * matmul(a, b.T)).sum()),
    ("reshape-transpose", lambda a, b: (a.reshape(3, 4).T * b.reshape(4, 3)).sum()),
    ("getitem", lambda a, b: (a[1:, ::2] * b[:2, 1:3]).sum() + (a[[0, 0, 2]] * b[[1, 2, 2]]).sum()),
    ("mean", lambda a, b: (a.mean(axis=0) * b.sum(axis=0)).sum()),
    ("softmax", lambda a, b: (softmax_stable(a) * b).sum()),
    ("concat", lambda a, b: (concat([a, b * a], axis=1) * concat([b, a], axis=1)).sum()),
    ("gather-scatter", lambda a, b: (scatter_rows(gather_rows(a, np.array([2, 0, 2])), np.array([1, 0, 3]), 5)
                                     * scatter_rows(b[:3], np.array([1, 0, 3]), 5)).sum()),
    ("cross-entropy", lambda a, b: cross_entropy(a * b, np.array([1, -100, 3]))),
    ("mse", lambda a, b: mse_loss(a * b, np.ones((3, 4)))),
])
def test_op_gradients(rng, name, fn):
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4)))
    assert grad_check(fn, [a, b]) < 1e-7, name


def test_fan_out_gradients_accumulate():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = x * x + x * 3.0 + x
    tape.backward(y)
    assert x.grad.tolist() == [2 * 2.0 + 3.0 + 1.0]


def test_no_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_tapes_are_thread_confined():
    seen = {}

    def worker():
        from mosaicbert.numerics import current_tape
        seen["tape"] = current_tape()

    with Tape():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["tape"] is None


def test_cross_entropy_matches_manual(rng):
    logits = rng.normal(size=(4, 6))
    labels = np.array([1, -100, 5, 0])
    keep = labels != -100
    lse = np.log(np.exp(logits).sum(axis=1))
    manual = np.mean(lse[keep] - logits[keep, labels[keep]])
    assert abs(cross_entropy(Tensor(logits), labels).item() - manual) < 1e-12


def test_cross_entropy_without_labels_is_zero(rng):
    assert cross_entropy(Tensor(rng.normal(size=(2, 3))), np.full(2, -100)).item() == 0.0


def test_dropout_identity_when_not_training(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert dropout(x, 0.5, rng, training=False) is x
    y = dropout(x, 0.5, np.random.default_rng(0), training=True).data
    kept = y != 0
    assert np.allclose(y[kept], 2 * x.data[kept])


def test_multiply_counter_scopes():
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))
    with MultiplyCounter() as c:
        with op_scope("ff"):
            matmul(a, b)
        a * a
    assert c["ff"] == 2 * 3 * 4
    assert c.total == 24 + 6

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mosaicbert.alibi import alibi_bias, alibi_bias_stack, alibi_slopes, bias_for_slopes, extend_bias
from mosaicbert.errors import ConfigError


def test_slopes_eight_heads():
    assert alibi_slopes(8).slopes == tuple(1 / 2 ** k for k in range(1, 9))


def test_slopes_one_head():
    assert alibi_slopes(1).slopes == (2 ** -8,)


def test_slopes_twelve_heads():
    s = alibi_slopes(12).slopes
    assert abs(s[0] - 0.6300) < 1e-4 and abs(s[0] - 2 ** (-2 / 3)) < 1e-15
    assert s[-1] == 2 ** -8


def test_zero_heads_rejected():
    with pytest.raises(ConfigError):
        alibi_slopes(0)


@given(st.integers(1, 64))
def test_slopes_geometric_and_decreasing(n):
    s = np.array(alibi_slopes(n).slopes)
    assert np.all((s > 0) & (s < 1))
    assert np.all(np.diff(s) < 0)
    assert np.allclose(s[1:] / s[:-1], 2 ** (-8 / n), rtol=0, atol=1e-12)


def test_bias_examples():
    assert alibi_bias(3, 1.0).bias.tolist() == [[0, -1, -2], [-1, 0, -1], [-2, -1, 0]]
    assert alibi_bias(1, 0.37).bias.tolist() == [[0.0]]
    assert alibi_bias(2, 0.5).bias.tolist() == [[0, -0.5], [-0.5, 0]]


def test_extend_bias():
    m = 0.125
    assert np.array_equal(extend_bias(4, 8, m).bias[:4, :4], alibi_bias(4, m).bias)
    assert extend_bias(128, 256, m).bias.shape == (256, 256)
    assert np.array_equal(extend_bias(16, 16, m).bias, alibi_bias(16, m).bias)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 512), st.sampled_from([1, 2, 4, 12]))
def test_bias_stack_shape_properties(length, heads):
    b = alibi_bias_stack(length, heads)
    assert b.shape == (heads, length, length)
    assert np.array_equal(b, np.swapaxes(b, 1, 2))
    assert not np.diagonal(b, axis1=1, axis2=2).any()
    row = b[:, length // 2]
    i = length // 2
    assert np.all(np.diff(row[:, i:], axis=-1) <= 0) and np.all(np.diff(row[:, : i + 1], axis=-1) >= 0)


def test_self_position_wins_under_equal_scores():
    b = alibi_bias_stack(9, 4)
    scores = np.zeros((4, 9, 9)) + b
    assert np.array_equal(scores.argmax(axis=-1), np.tile(np.arange(9), (4, 1)))


def test_bias_stack_is_cached_and_read_only():
    a = alibi_bias_stack(10, 3)
    assert a is alibi_bias_stack(10, 3)
    with pytest.raises(ValueError):
        a[0, 0, 0] = 1.0
    assert bias_for_slopes(10, alibi_slopes(3)) is a

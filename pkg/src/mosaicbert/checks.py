"""Fast self-checks behind ``mosaicbert check``.

Each check compares a production routine with an independent computation
(brute force, a reference loop, closed-form arithmetic) on small inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def bf16_reference(x: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even to bf16 by explicit neighbour comparison in f64."""
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    out = np.empty_like(x)
    bits = x.view(np.uint32)
    for i, (v, b) in enumerate(zip(x.tolist(), bits.tolist())):
        if math.isnan(v):
            out[i] = np.nan
            continue
        lo_bits = b & 0xFFFF0000
        lo = float(np.array([lo_bits], dtype=np.uint32).view(np.float32)[0])
        if lo_bits & 0x7F800000 == 0x7F800000:  # already inf
            out[i] = lo
            continue
        hi = float(np.array([lo_bits + 0x10000], dtype=np.uint32).view(np.float32)[0])
        # past the largest finite value the upper neighbour sits at 2^128
        hi_val = math.copysign(2.0 ** 128, v) if math.isinf(hi) else hi
        dlo, dhi = abs(v - lo), abs(hi_val - v)
        if dlo < dhi or (dlo == dhi and not (lo_bits >> 16) & 1):
            out[i] = lo
        else:
            out[i] = hi
    return out


def _check_bf16() -> str:
    from .numerics import bf16_round

    rng = np.random.default_rng(0)
    x = np.concatenate([rng.integers(0, 2 ** 32, size=4000, dtype=np.uint64).astype(np.uint32).view(np.float32),
                        np.array([0.0, -0.0, np.inf, -np.inf, 1e-45, -1e-45, 3.4e38], dtype=np.float32)])
    got, ref = bf16_round(x), bf16_reference(x)
    same = (got.view(np.uint32) == ref.view(np.uint32)) | (np.isnan(got) & np.isnan(ref))
    assert same.all(), f"{(~same).sum()} mismatches"
    return f"{x.size} values bit-exact"


def _check_alibi() -> str:
    from .alibi import alibi_bias_stack, alibi_slopes

    s = alibi_slopes(8).as_array()
    assert np.allclose(s, [2.0 ** -(k + 1) for k in range(8)], rtol=0, atol=0)
    b = alibi_bias_stack(5, 8)
    i, j = np.indices((5, 5))
    assert np.array_equal(b[3], -s[3] * np.abs(i - j))
    return "slopes 1/2..1/256 for 8 heads; bias symmetric"


def _check_attention() -> str:
    from .alibi import alibi_slopes
    from .attention import TileStats, attention_core_naive, attention_core_tiled
    from .numerics import Tensor

    rng = np.random.default_rng(1)
    worst = 0.0
    for l, kb in ((9, 1), (17, 7), (33, 64)):
        q, k, v = (Tensor(rng.normal(size=(2, 3, l, 4))) for _ in range(3))
        mask = np.arange(l)[None, :] < np.array([[l], [max(1, l - 4)]])
        a = attention_core_naive(q, k, v, alibi_slopes(3), mask).data
        st = TileStats()
        b = attention_core_tiled(q, k, v, alibi_slopes(3), mask, kb, st).data
        assert st.peak_score_elements <= l * min(kb, l)
        worst = max(worst, float(np.abs(a - b).max()))
    assert worst <= 1e-10, worst
    return f"naive vs tiled max |diff| {worst:.1e} (f64)"


def _check_unpad() -> str:
    from .unpad import pad, unpad

    rng = np.random.default_rng(2)
    lens = np.array([5, 1, 8, 3])
    mask = np.arange(8)[None, :] < lens[:, None]
    x = np.where(mask[..., None], rng.normal(size=(4, 8, 3)), 0.0).astype(np.float32)
    back = pad(unpad(x, mask))
    assert back.tobytes() == x.tobytes()
    return "pad(unpad(x)) is bitwise identical"


def _check_glu() -> str:
    from .layers import EncoderConfig, geglu_fused, geglu_naive, init_weights
    from .numerics import Tensor

    cfg = EncoderConfig(hidden=16, n_heads=2, n_layers=1, intermediate=24, vocab_size=64, fused_glu=False)
    w = init_weights(cfg, 3).blocks[0].ff
    x = Tensor(np.random.default_rng(3).normal(size=(2, 5, 16)))
    d = float(np.abs(geglu_naive(x, w).data - geglu_fused(x, w.fuse()).data).max())
    split = w.fuse().split()
    assert all(np.array_equal(getattr(split, f).data, getattr(w, f).data) for f in ("w1", "b1", "v", "bv", "w2", "b2"))
    assert d <= 1e-6, d
    return f"fused vs naive max |diff| {d:.1e}; split(fuse(w)) exact"


def _check_schedule() -> str:
    from .train import Schedule, lr_at

    s = Schedule(1000, 5e-4)
    assert lr_at(60, s) == 5e-4 and lr_at(1000, s) == 0.02 * 5e-4 and lr_at(0, s) == 0.0
    return "lr(6%) = peak, lr(end) = 0.02 peak"


def _check_adamw() -> str:
    from .numerics import Tensor
    from .train import OptimizerState, adamw_step

    w = Tensor(np.ones((1, 1)))
    adamw_step({"w": w}, {"w": np.ones((1, 1))}, OptimizerState(weight_decay=0.0), 0.1)
    expect = 1.0 - 0.1 / (1.0 + 1e-6)
    assert abs(w.item() - expect) < 1e-15
    return f"single step w' = {w.item():.9f}"


def _check_pareto() -> str:
    from .bench import ParetoPoint, dominates, pareto_front

    rng = np.random.default_rng(4)
    for _ in range(50):
        pts = [ParetoPoint(float(rng.integers(0, 6)), float(rng.integers(0, 6)), str(i), i) for i in range(20)]
        brute = {p for p in pts if not any(dominates(q, p) for q in pts)}
        assert set(pareto_front(pts)) == brute
    return "matches brute force on 50 instances"


def _check_accounting() -> str:
    from .bench import cost_estimate, mfu
    from .data import round_vocab
    from .layers import count_params, preset

    assert round_vocab(30522) == 30528
    assert str(cost_estimate(1.13, 8, 2.5)) == "22.60"
    assert abs(mfu(110e6, 0.4e6, 8, 312e12) - 0.104) <= 0.005
    n = count_params(preset("mosaicbert-base"))
    assert abs(n - 137e6) / 137e6 < 0.01
    return f"vocab 30528, $22.60, MFU 10.6%, {n:,} params"


CHECKS: dict[str, Callable[[], str]] = {
    "bf16-rounding": _check_bf16,
    "alibi": _check_alibi,
    "attention-paths": _check_attention,
    "unpad-roundtrip": _check_unpad,
    "glu-equivalence": _check_glu,
    "schedule": _check_schedule,
    "adamw": _check_adamw,
    "pareto": _check_pareto,
    "accounting": _check_accounting,
}


def run_checks() -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        try:
            results.append(CheckResult(name, True, fn()))
        except Exception as e:  # a failing check is reported, not raised
            results.append(CheckResult(name, False, f"{type(e).__name__}: {e}"))
    return results

"""Throughput, FLOP accounting, utilization, cost and Pareto fronts."""
from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Sequence

import numpy as np

from .data import IGNORE_INDEX
from .errors import ConfigError, DataError, MeasurementError, SchemaError
from .layers import EncoderConfig, EncoderWeights, count_params, model_forward, named_parameters
from .numerics import MultiplyCounter, Tape, cross_entropy
from .train.metrics import MetricsLog

A100_BF16_PEAK = 312e12


# -- utilization -----------------------------------------------------------

def mfu(n_params: float, tokens_per_s: float, n_devices: float, peak_flops_per_device: float = A100_BF16_PEAK) -> float:
    """Model FLOPs utilization, counting 6 FLOPs per parameter per token and
    ignoring the attention score/context products."""
    if n_params < 0 or tokens_per_s < 0 or n_devices < 0 or peak_flops_per_device < 0:
        raise ConfigError("mfu inputs must be non-negative")
    denom = n_devices * peak_flops_per_device
    if denom == 0:
        raise ConfigError("mfu needs a positive device count and peak FLOP rate")
    return 6.0 * n_params * tokens_per_s / denom


def flops_per_token(config: EncoderConfig, include_attention: bool = False, seq_len: int = 0) -> int:
    """Training FLOPs per token.  With ``include_attention`` the QK^T and PV
    products are added: 2 matmuls x 2 FLOPs x hidden x L forward, tripled for
    forward plus backward."""
    total = 6 * count_params(config)
    if include_attention:
        total += 12 * config.n_layers * config.hidden * int(seq_len)
    return total


# -- cost ------------------------------------------------------------------

def _dec(x) -> Decimal:
    return x if isinstance(x, Decimal) else Decimal(str(x))


def cost_estimate(wallclock_hours, n_devices, price_per_device_hour) -> Decimal:
    h, n, p = _dec(wallclock_hours), _dec(n_devices), _dec(price_per_device_hour)
    if h < 0 or n < 0 or p < 0:
        raise ConfigError("cost inputs must be non-negative")
    return (h * n * p).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def format_money(amount: Decimal) -> str:
    return f"${amount:,.2f}"


def format_percent(fraction: float, digits: int = 1) -> str:
    return f"{100.0 * fraction:.{digits}f}%"


# -- throughput ------------------------------------------------------------

@dataclass
class ThroughputSample:
    tokens_per_second: float
    n_devices: int
    peak_flops_per_device: float
    wallclock_s: float
    padded_tokens_per_second: float = 0.0
    real_tokens: int = 0
    padded_tokens: int = 0
    ff_multiplies: int = 0
    trial_seconds: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.tokens_per_second <= 0 or self.n_devices <= 0 or self.peak_flops_per_device <= 0 or \
                self.wallclock_s <= 0:
            raise MeasurementError("throughput sample fields must all be positive")

    def mfu(self, n_params: int) -> float:
        return mfu(n_params, self.tokens_per_second, self.n_devices, self.peak_flops_per_device)


def measure_throughput(weights: EncoderWeights, config: EncoderConfig, token_ids: np.ndarray, mask: np.ndarray,
                       n_trials: int = 5, warmup_trials: int = 1, *, peak_flops_per_device: float = A100_BF16_PEAK,
                       min_trial_s: float = 1e-3, timer: Callable[[], float] = time.perf_counter) -> ThroughputSample:
    """Median forward+backward throughput of an MLM step on one batch.

    Every real token is a prediction target so the head cost is identical
    across padded and unpadded modes.
    """
    if n_trials < 1 or warmup_trials < 0:
        raise ConfigError("n_trials must be >= 1 and warmup_trials >= 0")
    ids = np.asarray(token_ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    real, padded = int(mask.sum()), int(mask.size)
    if real == 0:
        raise DataError("batch contains no real tokens")
    labels = np.where(mask, ids, IGNORE_INDEX)
    params = named_parameters(weights).values()

    def trial() -> None:
        with Tape() as tape:
            loss = cross_entropy(model_forward(ids, None, mask, config, weights), labels)
        tape.backward(loss)
        for p in params:
            p.grad = None

    for _ in range(warmup_trials):
        trial()
    times = []
    for _ in range(n_trials):
        t0 = timer()
        trial()
        dt = timer() - t0
        if dt < min_trial_s:
            raise MeasurementError(f"trial took {dt * 1e3:.3f} ms, below the {min_trial_s * 1e3:g} ms timer floor; "
                                   "use a larger batch")
        times.append(dt)
    with MultiplyCounter() as counter:
        model_forward(ids, None, mask, config, weights)
    med = statistics.median(times)
    return ThroughputSample(real / med, 1, peak_flops_per_device, med, padded / med, real, padded, counter["ff"],
                            times)


# -- Pareto ----------------------------------------------------------------

@dataclass(frozen=True, order=True)
class ParetoPoint:
    wallclock_hours: float
    metric: float
    run_id: str = ""
    step: int = 0

    def __post_init__(self):
        if not self.wallclock_hours >= 0:
            raise ConfigError(f"wallclock must be non-negative, got {self.wallclock_hours}")
        if math.isnan(self.metric):
            raise ConfigError("metric must not be NaN")


def _order(p: ParetoPoint):
    return (p.wallclock_hours, p.run_id, p.step)


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    return (a.wallclock_hours <= b.wallclock_hours and a.metric >= b.metric
            and (a.wallclock_hours < b.wallclock_hours or a.metric > b.metric))


def pareto_front(points: Sequence[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated points (faster is better, higher metric is better),
    sorted by wallclock, then run_id, then step."""
    pts = sorted(points, key=_order)
    front: list[ParetoPoint] = []
    best_before = -math.inf  # best metric among strictly faster points
    i = 0
    while i < len(pts):
        j = i
        while j < len(pts) and pts[j].wallclock_hours == pts[i].wallclock_hours:
            j += 1
        group = pts[i:j]
        top = max(p.metric for p in group)
        if top > best_before:
            front.extend(p for p in group if p.metric == top)
            best_before = top
        i = j
    return front


PARETO_HEADER = ("run_id", "step", "wallclock_hours", "metric", "on_front")

_LOWER_IS_BETTER = ("mlm_loss", "loss", "mse")


def pareto_points(logs: Sequence[MetricsLog], metric_name: str | None = None) -> list[tuple[ParetoPoint, float]]:
    """(point, reported value) per logged row.  Loss-like metrics are negated
    inside the point so that higher is always better.  Rows logged without
    timing count as 0 hours."""
    if not logs:
        raise SchemaError("no metrics logs given")
    name = metric_name or logs[0].metric_name
    bad = sorted({log.metric_name for log in logs if log.metric_name != name})
    if bad:
        raise SchemaError(f"metric mismatch: expected {name!r}, logs report {bad}")
    sign = -1.0 if name in _LOWER_IS_BETTER else 1.0
    out = []
    for log in logs:
        for r in log.rows:
            value = r.mlm_loss if name == "mlm_loss" else r.eval_metric
            if value is None:
                continue
            hours = (r.wallclock_s or 0.0) / 3600.0
            out.append((ParetoPoint(hours, sign * value, log.run_id, r.step), value))
    if not out:
        raise SchemaError(f"the logs hold no values for metric {name!r}")
    return out


def pareto_emit(logs: Sequence[MetricsLog], metric_name: str | None = None) -> str:
    pairs = pareto_points(logs, metric_name)
    front = set(pareto_front([p for p, _ in pairs]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PARETO_HEADER)
    for p, value in sorted(pairs, key=lambda pv: _order(pv[0])):
        w.writerow([p.run_id, p.step, repr(p.wallclock_hours), repr(float(value)), int(p in front)])
    return buf.getvalue()


# -- reporting -------------------------------------------------------------

def format_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    """Aligned plain-text table; numbers right aligned."""
    if not rows:
        return ""
    columns = list(columns or rows[0].keys())
    cells = [[str(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    numeric = [all(_is_number(row[i]) for row in cells) for i in range(len(columns))]

    def line(vals):
        return "  ".join(v.rjust(w) if num else v.ljust(w) for v, w, num in zip(vals, widths, numeric)).rstrip()

    return "\n".join([line(columns), line(["-" * w for w in widths])] + [line(r) for r in cells]) + "\n"


def _is_number(s: str) -> bool:
    try:
        float(s.replace("$", "").replace("%", "").replace(",", ""))
        return True
    except ValueError:
        return False


def to_json(obj) -> str:
    def default(o):
        if isinstance(o, Decimal):
            return str(o)
        if hasattr(o, "__dataclass_fields__"):
            return asdict(o)
        if isinstance(o, np.generic):
            return o.item()
        raise TypeError(f"cannot serialise {type(o).__name__}")

    return json.dumps(obj, default=default, sort_keys=True, indent=2)

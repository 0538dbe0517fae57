"""Linear warmup followed by linear decay to a fraction of the peak."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from ..errors import ConfigError, ScheduleExhaustedError


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    lr_peak: float = 5e-4
    warmup_fraction: float = 0.06
    final_lr_fraction: float = 0.02

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if not 0.0 <= self.final_lr_fraction <= 1.0:
            raise ConfigError("final_lr_fraction must lie in [0, 1]")

    @property
    def warmup_steps(self) -> Fraction:
        # exact rational boundary, so 0.06 * total lands on the peak exactly
        return Fraction(str(self.warmup_fraction)) * self.total_steps


def lr_at(step: int, schedule: Schedule) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step > schedule.total_steps:
        raise ScheduleExhaustedError(f"step {step} is past the end of a {schedule.total_steps}-step schedule")
    peak, warm = schedule.lr_peak, schedule.warmup_steps
    if step <= warm:
        return peak if step == warm else peak * float(Fraction(step) / warm)
    frac = float((step - warm) / (schedule.total_steps - warm))
    return peak * (1.0 - frac) + schedule.final_lr_fraction * peak * frac

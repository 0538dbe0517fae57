"""Per-interval training metrics and their CSV form."""
from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from dataclasses import dataclass, field

from ..errors import SchemaError

HEADER = ("step", "wallclock_s", "tokens_seen", "mlm_loss", "eval_metric")


@dataclass
class MetricsRow:
    step: int
    wallclock_s: float | None  # None when written without timing
    tokens_seen: int
    mlm_loss: float | None = None
    eval_metric: float | None = None

    def to_dict(self) -> dict:
        return {"step": self.step, "wallclock_s": self.wallclock_s, "tokens_seen": self.tokens_seen,
                "mlm_loss": self.mlm_loss, "eval_metric": self.eval_metric}


@dataclass
class MetricsLog:
    run_id: str = "run"
    metric_name: str = "mlm_loss"
    rows: list[MetricsRow] = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def tail(self, n: int = 20) -> list[dict]:
        return [r.to_dict() for r in self.rows[-n:]]

    def to_csv(self, no_timing: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for r in self.rows:
            w.writerow([r.step, "" if no_timing else _fmt(r.wallclock_s), r.tokens_seen, _fmt(r.mlm_loss),
                        _fmt(r.eval_metric)])
        return buf.getvalue()

    def write_csv(self, path, no_timing: bool = False) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv(no_timing))

    @classmethod
    def from_csv(cls, text: str, run_id: str = "run", metric_name: str = "mlm_loss") -> "MetricsLog":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != HEADER:
            raise SchemaError(f"metrics CSV header must be {','.join(HEADER)}, got {header}")
        log = cls(run_id, metric_name)
        for line in reader:
            if len(line) != len(HEADER):
                raise SchemaError(f"metrics row has {len(line)} fields: {line}")
            s, t, n, loss, ev = line
            log.append(MetricsRow(int(s), _parse(t), int(n), _parse(loss), _parse(ev)))
        return log

    @classmethod
    def read_csv(cls, path, run_id: str | None = None, metric_name: str = "mlm_loss") -> "MetricsLog":
        p = Path(path)
        return cls.from_csv(p.read_text(encoding="utf-8"), run_id or p.stem, metric_name)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _parse(s: str) -> float | None:
    if s == "":
        return None
    v = float(s)
    return v if not math.isnan(v) else None

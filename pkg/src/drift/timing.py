from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable

PHASES = (
    "encryption",
    "decryption",
    "block_management",
    "representation_transfer",
    "gradient_compute",
    "update_apply",
    "evaluation",
)


@dataclass
class TimeBreakdown:
    """Seconds spent per phase, summed over every actor that ran it."""

    durations: dict[str, float] = field(default_factory=lambda: dict.fromkeys(PHASES, 0.0))

    @property
    def total(self) -> float:
        return sum(self.durations.values())

    def shares(self) -> dict[str, float]:
        total = self.total
        if total <= 0:
            return dict.fromkeys(self.durations, 0.0)
        return {k: v / total for k, v in self.durations.items()}

    def merged(self, other: "TimeBreakdown") -> "TimeBreakdown":
        return TimeBreakdown({k: self.durations.get(k, 0.0) + other.durations.get(k, 0.0) for k in PHASES})


class _Span:
    __slots__ = ("_timer", "_phase", "_t0")

    def __init__(self, timer: "PhaseTimer", phase: str):
        self._timer = timer
        self._phase = phase

    def __enter__(self):
        self._t0 = self._timer.clock()
        return self

    def __exit__(self, *exc):
        self._timer.add(self._phase, self._timer.clock() - self._t0)
        return False


class _NullSpan:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NULL = _NullSpan()


class PhaseTimer:
    """Accumulates spans per phase.

    Each thread adds into its own table, so spans never contend on a lock;
    :meth:`breakdown` sums the tables. The default clock is the monotonic
    wall clock. With several busy threads, pass ``time.thread_time``: a
    wall-clock span also counts the time its thread sat waiting for the
    interpreter lock while other threads ran.
    """

    def __init__(self, enabled: bool = True, clock: Callable[[], float] = time.perf_counter):
        self.enabled = enabled
        self.clock = clock
        self._local = threading.local()
        self._tables: list[dict[str, float]] = []
        self._lock = threading.Lock()

    def _table(self) -> dict[str, float]:
        table = getattr(self._local, "table", None)
        if table is None:
            table = self._local.table = dict.fromkeys(PHASES, 0.0)
            with self._lock:
                self._tables.append(table)
        return table

    def add(self, phase: str, seconds: float) -> None:
        self._table()[phase] += seconds

    def span(self, phase: str):
        return _Span(self, phase) if self.enabled else _NULL

    def breakdown(self) -> TimeBreakdown:
        totals = dict.fromkeys(PHASES, 0.0)
        with self._lock:
            for table in self._tables:
                for k, v in table.items():
                    totals[k] += v
        return TimeBreakdown(totals)

    def reset(self) -> None:
        with self._lock:
            for table in self._tables:
                for k in table:
                    table[k] = 0.0

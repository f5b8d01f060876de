"""Per-scenario wall-clock budget shared by the retry ladder and the reflective loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

DEFAULT_B_TIME_MS = 100.0
DEFAULT_B_CYCLES = 2
DEFAULT_EPSILON = 0.01


@dataclass(frozen=True)
class TimeBudget:
    b_time_ms: float = DEFAULT_B_TIME_MS
    b_cycles: int = DEFAULT_B_CYCLES
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.b_time_ms > 0:
            raise ValueError(f"b_time_ms must be > 0, got {self.b_time_ms}")
        if self.b_cycles < 0:
            raise ValueError(f"b_cycles must be >= 0, got {self.b_cycles}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")

    def start(self) -> "BudgetClock":
        return BudgetClock(self)


@dataclass
class BudgetClock:
    """A running budget. ``charge`` lets tests and callers account time explicitly."""

    budget: TimeBudget
    started: float = field(default_factory=time.perf_counter)
    charged_ms: float = 0.0

    def elapsed_ms(self) -> float:
        return (time.perf_counter() - self.started) * 1000.0 + self.charged_ms

    def remaining_ms(self) -> float:
        return self.budget.b_time_ms - self.elapsed_ms()

    def charge(self, ms: float) -> None:
        self.charged_ms += ms

    def exhausted(self) -> bool:
        return self.elapsed_ms() > self.budget.b_time_ms

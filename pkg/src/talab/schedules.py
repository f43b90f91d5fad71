"""Per-iteration step-size weight sequences.

A schedule emits T nonnegative weights summing to one; the attack step at
iteration i is ``eps * step_scale * w_i``.  The uniform ("identity")
schedule with T=10 therefore reproduces the classic constant step
eps/T = 1.6/255 at eps = 16/255.

Decreasing shapes are indexed by the remaining-iteration count
d_i = T - i + 1 (i = 1..T), so every weight stays positive:
log ~ ln(d_i + 1), linear ~ d_i, exp ~ e^{d_i}, and pvalue ~ 1/i^p.
The increasing direction is the elementwise reversal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

SCHEDULE_KINDS = ("identity", "log", "linear", "exp", "pvalue")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "identity"
    p: float = 0.6
    direction: str = "decreasing"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.direction not in ("decreasing", "increasing"):
            raise ConfigurationError(
                f"unknown schedule direction {self.direction!r}"
            )

    def reversed(self) -> "ScheduleSpec":
        other = "increasing" if self.direction == "decreasing" else "decreasing"
        return ScheduleSpec(self.kind, self.p, other)


def make_schedule(spec: ScheduleSpec, iters: int) -> np.ndarray:
    """Weights w_1..w_T, nonnegative, summing to 1."""
    if iters < 1:
        raise ConfigurationError("schedule needs at least one iteration")
    i = np.arange(1, iters + 1, dtype=np.float64)
    d = iters - i + 1.0
    if spec.kind == "identity":
        raw = np.ones(iters)
    elif spec.kind == "log":
        raw = np.log(d + 1.0)
    elif spec.kind == "linear":
        raw = d
    elif spec.kind == "exp":
        raw = np.exp(d - d.max())
    elif spec.kind == "pvalue":
        raw = i ** (-spec.p)
    weights = raw / raw.sum()
    if spec.direction == "increasing":
        weights = weights[::-1].copy()
    return weights

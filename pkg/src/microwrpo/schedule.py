"""Time-varying fusion coefficient alpha(t).

The linear kind ramps from 0 at step 0 to the target at total_steps and
clamps there; the static kind holds the target throughout (the ablation
baseline). Alpha advances per optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InputError

__all__ = ["FusionSchedule", "alpha_at"]

SCHEDULE_KINDS = ("linear", "static")


@dataclass(frozen=True)
class FusionSchedule:
    kind: str
    target: float
    total_steps: int

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise InputError(f"unknown schedule kind {self.kind!r}")
        if not 0 <= self.target <= 1:
            raise InputError("schedule target must be in [0, 1]")
        if self.total_steps < 1:
            raise InputError("total_steps must be >= 1")


def alpha_at(schedule: FusionSchedule, step: int) -> float:
    """Fusion coefficient at an optimizer step (clamped beyond total_steps)."""
    if step < 0:
        raise InputError("step must be >= 0")
    if schedule.kind == "static":
        return schedule.target
    return min(schedule.target, schedule.target * step / schedule.total_steps)

"""Time-varying weight alpha(tau) for the rebalancing term."""

import enum
import math
import warnings
from dataclasses import dataclass

from .errors import ConfigError


class ScheduleKind(str, enum.Enum):
    SIN = "sin"
    COS = "cos"
    CONST = "const"


@dataclass(frozen=True)
class Schedule:
    kind: ScheduleKind
    amplitude: float
    total_steps: int

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.amplitude < 0:
            raise ConfigError(f"amplitude must be >= 0, got {self.amplitude}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")

    @classmethod
    def normalized(cls, kind, a_prime, num_classes, total_steps):
        """Build from the class-count-normalized amplitude A' = A / C."""
        return cls(kind, float(a_prime) * num_classes, total_steps)


def alpha(schedule, step):
    """Weight of the rebalancing loss after ``step`` optimizer iterations."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if step > schedule.total_steps:
        warnings.warn(f"step {step} beyond schedule horizon {schedule.total_steps}; clamped", stacklevel=2)
        step = schedule.total_steps
    frac = step / schedule.total_steps
    if schedule.kind is ScheduleKind.SIN:
        return schedule.amplitude * math.sin(math.pi * frac)
    if schedule.kind is ScheduleKind.COS:
        return schedule.amplitude * math.cos(math.pi * frac / 2.0)
    return schedule.amplitude

"""Navigation and control command types shared by every stage of the pipeline."""

from __future__ import annotations

import enum
from dataclasses import dataclass

STEER_DEGREES = 70.0


class NavCommand(enum.IntEnum):
    """High-level directional switch; the integer value is the policy branch index."""

    STRAIGHT = 0
    LANE_FOLLOW = 1
    TURN_RIGHT = 2
    TURN_LEFT = 3

    @classmethod
    def parse(cls, value: "NavCommand | int | str") -> "NavCommand":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown navigation command {value!r}") from None
        try:
            return cls(int(value))
        except ValueError:
            raise ValueError(f"unknown navigation command {value!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class ControlCommand:
    """Policy action: normalized steer in [-1, 1] (positive = right) and speed in [0, 1]."""

    steer: float
    speed: float

    def clipped(self) -> "ControlCommand":
        return ControlCommand(min(1.0, max(-1.0, self.steer)), min(1.0, max(0.0, self.speed)))

    def speed_mps(self, v_max: float) -> float:
        return self.speed * v_max

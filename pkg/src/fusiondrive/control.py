"""Low-level actuation: PID speed tracking and steering denormalization."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .commands import STEER_DEGREES


@dataclass(frozen=True)
class PidState:
    kp: float = 1.0
    ki: float = 0.3
    kd: float = 0.02
    integral: float = 0.0
    prev_error: float = 0.0
    integral_limit: float = 1.0
    primed: bool = False

    def reset(self) -> "PidState":
        return replace(self, integral=0.0, prev_error=0.0, primed=False)


def pid_update(
    target_speed: float, measured_speed: float, dt: float, state: PidState
) -> tuple[tuple[float, float], PidState]:
    """One PID tick; returns ``((throttle, brake), new_state)``.

    The derivative term is zero on the first tick after a reset.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    error = target_speed - measured_speed
    integral = state.integral + error * dt
    integral = max(-state.integral_limit, min(state.integral_limit, integral))
    derivative = (error - state.prev_error) / dt if state.primed else 0.0
    u = state.kp * error + state.ki * integral + state.kd * derivative
    if u >= 0.0:
        throttle, brake = min(1.0, u), 0.0
    else:
        throttle, brake = 0.0, min(1.0, -u)
    new_state = replace(state, integral=integral, prev_error=error, primed=True)
    return (throttle, brake), new_state


def denormalize_steer(steer_norm: float) -> float:
    """Normalized steering to degrees."""
    return max(-1.0, min(1.0, steer_norm)) * STEER_DEGREES

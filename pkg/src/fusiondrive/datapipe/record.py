"""Expert episode recording with periodic steering-noise injection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..commands import ControlCommand, NavCommand
from ..control import PidState, pid_update
from ..simworld import (
    CameraConfig,
    CollisionReport,
    OffRouteError,
    RouteSpec,
    RouteTracker,
    V_MAX,
    WorldState,
    autopilot_action,
    check_collision,
    render_observation,
    step,
)

log = logging.getLogger(__name__)

KMH10 = 10.0 / 3.6


@dataclass
class Sample:
    rgb: np.ndarray
    depth: np.ndarray
    semantic_gt: np.ndarray
    nav_command: NavCommand
    steer_gt: float
    speed_gt: float
    noise_flag: bool
    pose: tuple[float, float, float]
    timestamp: float
    weather: str = ""


@dataclass
class Dataset:
    samples: list[Sample]
    town_id: str = ""
    balancing_report: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class NoiseSchedule:
    """One perturbation window of ``duration`` seconds every ``period`` seconds.

    Windows start at ``offset`` and then every period; each window draws a random
    sign and a peak magnitude and follows a ramp-hold-ramp profile.
    """

    period: float = 5.0
    duration: float = 1.0
    magnitude_range: tuple[float, float] = (0.15, 0.3)
    offset: float = 4.0
    ramp_fraction: float = 0.25

    def frames(self, dt: float) -> tuple[int, int, int]:
        return round(self.period / dt), round(self.duration / dt), round(self.offset / dt)

    def window_of(self, frame: int, dt: float) -> tuple[int, int] | None:
        """(window index, frame position within the window) or None outside windows."""
        per, dur, off = self.frames(dt)
        if frame < off:
            return None
        k, pos = divmod(frame - off, per)
        return (k, pos) if pos < dur else None

    def profile(self, pos: int, dt: float) -> float:
        dur = self.frames(dt)[1]
        ramp = max(1, int(round(dur * self.ramp_fraction)))
        up = (pos + 1) / ramp
        down = (dur - pos) / ramp
        return float(min(1.0, up, down))


class NoiseInjector:
    def __init__(self, schedule: NoiseSchedule | None, seed: int, dt: float):
        self.schedule = schedule
        self.rng = np.random.default_rng(seed)
        self.dt = dt
        self._windows: dict[int, float] = {}

    def _peak(self, k: int) -> float:
        while len(self._windows) <= k:
            lo, hi = self.schedule.magnitude_range
            sign = 1.0 if self.rng.random() < 0.5 else -1.0
            self._windows[len(self._windows)] = sign * float(self.rng.uniform(lo, hi))
        return self._windows[k]

    def __call__(self, frame: int) -> float | None:
        """Steer perturbation for this frame, or None when the frame is unperturbed."""
        if self.schedule is None:
            return None
        win = self.schedule.window_of(frame, self.dt)
        if win is None:
            return None
        peak = self._peak(win[0])
        if peak == 0.0:
            return None
        return peak * self.schedule.profile(win[1], self.dt)


Expert = Callable[[WorldState, RouteSpec, RouteTracker], ControlCommand]


def record_episode(
    world: WorldState,
    route: RouteSpec,
    expert: Expert | None = None,
    noise: NoiseSchedule | None = None,
    camera: CameraConfig | None = None,
    seed: int = 0,
    dt: float = 0.1,
    max_duration: float | None = None,
    goal_radius: float = 2.0,
    pid: PidState | None = None,
) -> list[Sample]:
    """Drive ``route`` with the expert and record one sample per frame.

    Ground truth is the expert's commanded steer/speed; the executed steer carries
    the injected perturbation during noise windows. Recording stops at the goal,
    on a collision, after ``max_duration`` (default: the 10 km/h time budget) or
    when the expert reports it has lost the route.
    """
    expert = expert or (lambda st, rt, tr: autopilot_action(st, rt, tr))
    camera = camera or CameraConfig()
    pid = pid or PidState()
    injector = NoiseInjector(noise, seed, dt)
    tracker = RouteTracker(route)
    limit = max_duration if max_duration is not None else route.length / KMH10
    n_frames = int(round(limit / dt))
    samples: list[Sample] = []
    state = world
    for frame in range(n_frames):
        rgb, depth, sem = render_observation(state, camera)
        try:
            action = expert(state, route, tracker)
        except OffRouteError as exc:
            log.warning("episode truncated at frame %d: %s", frame, exc)
            break
        command = tracker.command
        perturb = injector(frame)
        executed = action.steer if perturb is None else float(np.clip(action.steer + perturb, -1.0, 1.0))
        ego = state.ego
        samples.append(
            Sample(
                rgb=rgb,
                depth=depth,
                semantic_gt=sem,
                nav_command=command,
                steer_gt=float(np.clip(action.steer, -1.0, 1.0)),
                speed_gt=float(action.speed * V_MAX),
                noise_flag=perturb is not None,
                pose=(ego.x, ego.y, ego.heading),
                timestamp=round(state.time, 6),
                weather=state.weather.name,
            )
        )
        (throttle, brake), pid = pid_update(action.speed * V_MAX, ego.speed, dt, pid)
        state = step(state, (executed, throttle, brake), dt)
        if check_collision(state) == CollisionReport.AGENT:
            log.warning("episode ended by collision at frame %d", frame)
            break
        if math.hypot(state.ego.x - route.goal[0], state.ego.y - route.goal[1]) < goal_radius:
            break
    return samples


def strip_noise(dataset: Dataset) -> Dataset:
    kept = [s for s in dataset.samples if not s.noise_flag]
    if not kept and dataset.samples:
        log.warning("every sample carried injected noise; dataset is now empty")
    report = dict(dataset.balancing_report)
    report.setdefault("collected", len(dataset.samples))
    report["noise_stripped"] = len(kept)
    return Dataset(kept, dataset.town_id, report)

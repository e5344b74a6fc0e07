"""Scripted expert: pure-pursuit steering with a stop-behind-obstacle speed rule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..commands import ControlCommand, STEER_DEGREES
from .route import RouteSpec, RouteTracker
from .world import CRUISE_SPEED, V_MAX, WHEELBASE, WorldState


class OffRouteError(RuntimeError):
    pass


@dataclass
class AutopilotConfig:
    cruise_speed: float = CRUISE_SPEED
    turn_speed: float = 4.0
    stop_distance: float = 6.0
    slow_distance: float = 12.0
    recovery_bound: float = 4.0
    min_lookahead: float = 4.0
    lookahead_gain: float = 0.6
    prediction_horizon: float = 1.0


def pure_pursuit_steer(state_x: float, state_y: float, heading: float, target: np.ndarray) -> float:
    """Normalized steer towards ``target``; positive means right."""
    dx, dy = target[0] - state_x, target[1] - state_y
    fwd = dx * math.cos(heading) + dy * math.sin(heading)
    right = -dx * math.sin(heading) + dy * math.cos(heading)
    ld = math.hypot(fwd, right)
    if ld < 1e-9:
        return 0.0
    alpha = math.atan2(right, fwd)
    delta = math.atan(2.0 * WHEELBASE * math.sin(alpha) / ld)
    return float(np.clip(math.degrees(delta) / STEER_DEGREES, -1.0, 1.0))


def _interp_point(route: RouteSpec, s_all: np.ndarray, s: float) -> np.ndarray:
    s = min(s, s_all[-1])
    return np.array([np.interp(s, s_all, route.points[:, 0]), np.interp(s, s_all, route.points[:, 1])])


def obstacle_gap(
    state: WorldState, route: RouteSpec, idx: int, horizon: float, lane_half: float, predict: float = 0.0
) -> float:
    """Bumper-to-bumper distance to the nearest agent occupying the route ahead."""
    s_all = route.arclength
    ego = state.ego
    s0 = s_all[idx]
    hi = int(np.searchsorted(s_all, s0 + horizon + ego.half_extents[0] + 3.0, side="right"))
    window = route.points[idx:hi]
    if len(window) == 0:
        return math.inf
    best = math.inf
    for agent in state.agents:
        if abs(agent.x - ego.x) > horizon + 15 or abs(agent.y - ego.y) > horizon + 15:
            continue
        here = np.array([agent.x, agent.y])
        moved = here + agent.speed * predict * np.array([math.cos(agent.heading), math.sin(agent.heading)])
        for pos in (here, moved) if predict > 0 else (here,):
            d = np.linalg.norm(window - pos, axis=1)
            j = int(np.argmin(d))
            if d[j] > lane_half + agent.half_extents[1]:
                continue
            ahead = s_all[idx + j] - s0
            if ahead <= 0.0:
                continue
            best = min(best, ahead - ego.half_extents[0] - agent.half_extents[0])
    return best


def autopilot_action(
    state: WorldState,
    route: RouteSpec,
    tracker: RouteTracker | None = None,
    config: AutopilotConfig | None = None,
) -> ControlCommand:
    cfg = config or AutopilotConfig()
    ego = state.ego
    if tracker is None:
        tracker = RouteTracker(route, back=0, ahead=len(route.points))
    idx = tracker.update(ego.x, ego.y)
    lateral = tracker.lateral_error(ego.x, ego.y)
    if abs(lateral) > cfg.recovery_bound:
        raise OffRouteError(f"ego is {lateral:.2f} m off the route")

    s_all = tracker.s
    ld = max(cfg.min_lookahead, cfg.min_lookahead * 0.5 + cfg.lookahead_gain * ego.speed)
    target = _interp_point(route, s_all, s_all[idx] + ld)
    if s_all[-1] - s_all[idx] < ld:
        # extend the final segment beyond the goal
        tail = route.points[-1] - route.points[-2]
        tail = tail / max(np.linalg.norm(tail), 1e-9)
        target = route.points[-1] + tail * (ld - (s_all[-1] - s_all[idx]))
    steer = pure_pursuit_steer(ego.x, ego.y, ego.heading, target)

    speed = cfg.cruise_speed
    hi = int(np.searchsorted(s_all, s_all[idx] + 15.0, side="right"))
    seg = route.points[idx : max(hi, idx + 2)]
    if len(seg) >= 3:
        d = np.diff(seg, axis=0)
        headings = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
        if np.ptp(headings) > math.radians(30.0):
            speed = cfg.turn_speed
    gap = obstacle_gap(state, route, idx, cfg.slow_distance, state.town.lane_width / 2.0, cfg.prediction_horizon)
    if gap < cfg.stop_distance:
        speed = 0.0
    elif gap < cfg.slow_distance:
        frac = (gap - cfg.stop_distance) / (cfg.slow_distance - cfg.stop_distance)
        speed = min(speed, cfg.cruise_speed * frac)
    return ControlCommand(steer=steer, speed=speed / V_MAX)

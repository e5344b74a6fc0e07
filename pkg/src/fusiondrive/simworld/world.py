"""World state, scenario spawning, kinematic stepping and collision checks."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..commands import STEER_DEGREES
from .town import TownMap

WHEELBASE = 2.5
V_MAX = 10.0
CRUISE_SPEED = 6.0
MAX_WHEEL_ANGLE = math.radians(35.0)
MAX_ACCEL = 3.0
MAX_BRAKE = 8.0
ROLLING_DECEL = 0.1
DRAG_COEF = 0.05
SHOULDER = 0.3
PREDICTION_HORIZON = 1.0

VEHICLE_HALF = (2.25, 1.0)
VEHICLE_HEIGHT = 1.5
PEDESTRIAN_HALF = (0.3, 0.3)
PEDESTRIAN_HEIGHT = 1.8


class PlacementError(RuntimeError):
    pass


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    if -math.pi < theta <= math.pi:
        return theta  # keep in-range values bit-exact
    return math.pi - ((math.pi - theta) % (2.0 * math.pi))


@dataclass(frozen=True)
class WeatherParams:
    name: str
    tint: tuple[float, float, float]
    ground_gloss: float
    texture_noise_sigma: float


WEATHERS = {
    w.name: w
    for w in (
        WeatherParams("clear_afternoon", (1.0, 1.0, 1.0), 0.0, 0.03),
        WeatherParams("wet_afternoon", (0.92, 0.94, 0.98), 0.45, 0.04),
        WeatherParams("hard_rain_afternoon", (0.70, 0.74, 0.80), 0.6, 0.09),
        WeatherParams("clear_sunset", (1.0, 0.80, 0.62), 0.05, 0.03),
        WeatherParams("cloudy_wet_afternoon", (0.80, 0.82, 0.86), 0.5, 0.05),
        WeatherParams("soft_rain_sunset", (0.88, 0.72, 0.62), 0.35, 0.07),
        WeatherParams("wet_sunset", (0.95, 0.78, 0.64), 0.5, 0.04),
    )
}
TRAIN_WEATHERS = ("clear_afternoon", "wet_afternoon", "hard_rain_afternoon", "clear_sunset")
TEST_WEATHERS = {
    "corl2017": ("cloudy_wet_afternoon", "soft_rain_sunset"),
    "nocrash": ("wet_sunset", "soft_rain_sunset"),
}


def get_weather(name: str | WeatherParams) -> WeatherParams:
    if isinstance(name, WeatherParams):
        return name
    try:
        return WEATHERS[name]
    except KeyError:
        raise ValueError(f"unknown weather {name!r}") from None


@dataclass
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float = 0.0
    yaw_rate: float = 0.0
    half_extents: tuple[float, float] = VEHICLE_HALF
    height: float = VEHICLE_HEIGHT

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = self.half_extents
        local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.position


@dataclass
class ScriptedPath:
    """Pre-planned polyline followed by a traffic agent, with cumulative arc length."""

    points: np.ndarray
    s: np.ndarray
    loop: bool = False

    @classmethod
    def from_points(cls, points: np.ndarray, loop: bool = False) -> "ScriptedPath":
        keep = np.ones(len(points), dtype=bool)
        keep[1:] = np.linalg.norm(np.diff(points, axis=0), axis=1) > 1e-6
        pts = points[keep]
        s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        return cls(pts, s, loop)

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def pose_at(self, s: float) -> tuple[float, float, float]:
        if self.loop:
            s = s % self.length
        s = min(max(s, 0.0), self.length)
        i = int(np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2))
        seg = self.s[i + 1] - self.s[i]
        t = (s - self.s[i]) / seg if seg > 0 else 0.0
        p = self.points[i] + t * (self.points[i + 1] - self.points[i])
        d = self.points[i + 1] - self.points[i]
        return float(p[0]), float(p[1]), math.atan2(d[1], d[0])

    def points_ahead(self, s: float, horizon: float, step: float = 1.0) -> np.ndarray:
        ss = s + np.arange(0.0, horizon + 1e-9, step)
        if self.loop:
            ss = ss % self.length
        ss = np.clip(ss, 0.0, self.length)
        x = np.interp(ss, self.s, self.points[:, 0])
        y = np.interp(ss, self.s, self.points[:, 1])
        return np.stack([x, y], axis=1)


@dataclass
class WorldState:
    time: float
    ego: VehicleState
    traffic_vehicles: list[VehicleState]
    pedestrians: list[VehicleState]
    weather: WeatherParams
    rng_state: dict
    town: TownMap = field(repr=False)
    seed: int = 0
    frame: int = 0
    vehicle_paths: list[ScriptedPath] = field(default_factory=list, repr=False)
    vehicle_s: list[float] = field(default_factory=list)
    vehicle_cruise: list[float] = field(default_factory=list)
    pedestrian_paths: list[ScriptedPath] = field(default_factory=list, repr=False)
    pedestrian_s: list[float] = field(default_factory=list)
    pedestrian_speed: list[float] = field(default_factory=list)

    @property
    def agents(self) -> list[VehicleState]:
        return self.traffic_vehicles + self.pedestrians

    def snapshot(self) -> tuple:
        """Hashable numeric summary used for determinism checks."""
        rows = [(self.time, self.frame)]
        for v in [self.ego] + self.agents:
            rows.append((v.x, v.y, v.heading, v.speed, v.yaw_rate))
        return tuple(rows)


def _boxes_overlap(a: VehicleState, b: VehicleState, margin: float = 0.0) -> bool:
    """Separating-axis test for two oriented rectangles."""
    ca, cb = a.corners(), b.corners()
    axes = []
    for h in (a.heading, b.heading):
        axes.append((math.cos(h), math.sin(h)))
        axes.append((-math.sin(h), math.cos(h)))
    for ax in axes:
        ax = np.asarray(ax)
        pa, pb = ca @ ax, cb @ ax
        if pa.max() + margin < pb.min() or pb.max() + margin < pa.min():
            return False
    return True


def _random_lane_walk(town: TownMap, lane_id: int, s0: float, length: float, rng) -> ScriptedPath:
    lane = town.lanes[lane_id]
    pieces = [np.stack([lane.point_at(s0), lane.end])]
    travelled = lane.length - s0
    current = lane_id
    while travelled < length:
        succ = sorted(town.lane_graph.successors(current))
        nxt = int(succ[int(rng.integers(len(succ)))])
        conn = town.connectors[(current, nxt)]
        pieces.append(conn.points)
        nl = town.lanes[nxt]
        pieces.append(np.stack([nl.start, nl.end]))
        travelled += conn.length + nl.length
        current = nxt
    return ScriptedPath.from_points(np.concatenate(pieces))


def _pedestrian_path(town: TownMap, rng) -> ScriptedPath:
    """Back-and-forth stroll along a sidewalk, optionally crossing the road once."""
    r = int(rng.integers(len(town.roads)))
    a, b = town.roads[r]
    pa, pb = town.nodes[a], town.nodes[b]
    d = (pb - pa) / np.linalg.norm(pb - pa)
    normal = np.array([-d[1], d[0]])
    length = float(np.linalg.norm(pb - pa))
    lo, hi = town.sidewalk_band
    offset = town.road_half_width + 0.5 * (lo + hi)
    side = 1.0 if rng.random() < 0.5 else -1.0
    margin = town.spec.setback + 4.0
    s_a = float(rng.uniform(margin, length - margin))
    s_b = float(np.clip(s_a + rng.uniform(-20.0, 20.0), margin, length - margin))
    if abs(s_b - s_a) < 2.0:
        s_b = s_a + 2.0 if s_a + 2.0 <= length - margin else s_a - 2.0
    p0 = pa + d * s_a + normal * side * offset
    p1 = pa + d * s_b + normal * side * offset
    pts = [p0, p1]
    if rng.random() < 0.3:
        p2 = pa + d * s_b - normal * side * offset
        pts.append(p2)
    pts = np.array(pts + pts[-2::-1])
    return ScriptedPath.from_points(pts, loop=True)


def spawn_scenario(
    town: TownMap,
    n_vehicles: int,
    n_pedestrians: int,
    weather: WeatherParams | str,
    seed: int,
    ego_pose: tuple[float, float, float] | None = None,
    ego_clearance: float = 12.0,
) -> WorldState:
    if n_vehicles < 0 or n_pedestrians < 0:
        raise ValueError("agent counts must be non-negative")
    weather = get_weather(weather)
    rng = np.random.default_rng(seed)
    if ego_pose is None:
        lane = town.lanes[int(rng.integers(len(town.lanes)))]
        p = lane.point_at(float(rng.uniform(0.0, lane.length)))
        ego_pose = (float(p[0]), float(p[1]), lane.heading)
    ego = VehicleState(*ego_pose)

    # each parked box needs its length plus the 1 m margin on both ends of some lane
    capacity = sum(l.length for l in town.lanes) / (2 * VEHICLE_HALF[0] + 2.0)
    if n_vehicles > capacity:
        raise PlacementError(f"{n_vehicles} vehicles exceed the lane capacity of {town.town_id}")

    vehicles: list[VehicleState] = []
    paths: list[ScriptedPath] = []
    cruise: list[float] = []
    attempts = 0
    while len(vehicles) < n_vehicles:
        attempts += 1
        if attempts > 200 * (n_vehicles + 1) or attempts > 500 * (len(vehicles) + 1) + 5000:
            raise PlacementError(f"cannot place {n_vehicles} vehicles in {town.town_id}")
        lane = town.lanes[int(rng.integers(len(town.lanes)))]
        s0 = float(rng.uniform(0.0, lane.length))
        p = lane.point_at(s0)
        cand = VehicleState(float(p[0]), float(p[1]), lane.heading)
        if np.linalg.norm(cand.position - ego.position) < ego_clearance:
            continue
        if any(_boxes_overlap(cand, o, margin=1.0) for o in vehicles):
            continue
        vehicles.append(cand)
        paths.append(_random_lane_walk(town, lane.id, s0, 3000.0, rng))
        cruise.append(float(rng.uniform(4.0, 6.0)))

    pedestrians: list[VehicleState] = []
    ped_paths: list[ScriptedPath] = []
    ped_speed: list[float] = []
    attempts = 0
    while len(pedestrians) < n_pedestrians:
        attempts += 1
        if attempts > 200 * (n_pedestrians + 1):
            raise PlacementError(f"cannot place {n_pedestrians} pedestrians in {town.town_id}")
        path = _pedestrian_path(town, rng)
        x, y, h = path.pose_at(0.0)
        cand = VehicleState(x, y, h, half_extents=PEDESTRIAN_HALF, height=PEDESTRIAN_HEIGHT)
        if np.linalg.norm(cand.position - ego.position) < ego_clearance:
            continue
        if any(_boxes_overlap(cand, o, margin=0.5) for o in pedestrians + vehicles):
            continue
        pedestrians.append(cand)
        ped_paths.append(path)
        ped_speed.append(float(rng.uniform(0.9, 1.4)))

    return WorldState(
        time=0.0,
        ego=ego,
        traffic_vehicles=vehicles,
        pedestrians=pedestrians,
        weather=weather,
        rng_state=rng.bit_generator.state,
        town=town,
        seed=seed,
        vehicle_paths=paths,
        vehicle_s=[0.0] * len(vehicles),
        vehicle_cruise=cruise,
        pedestrian_paths=ped_paths,
        pedestrian_s=[0.0] * len(pedestrians),
        pedestrian_speed=ped_speed,
    )


def advance_ego(ego: VehicleState, steer_norm: float, throttle: float, brake: float, dt: float) -> VehicleState:
    """Kinematic bicycle update (explicit Euler on the pre-step speed and heading)."""
    steer_norm = min(1.0, max(-1.0, steer_norm))
    throttle = min(1.0, max(0.0, throttle))
    brake = min(1.0, max(0.0, brake))
    delta = math.radians(steer_norm * STEER_DEGREES)
    delta = min(MAX_WHEEL_ANGLE, max(-MAX_WHEEL_ANGLE, delta))
    v = ego.speed
    dtheta = (v / WHEELBASE) * math.tan(delta) * dt
    x = ego.x + v * math.cos(ego.heading) * dt
    y = ego.y + v * math.sin(ego.heading) * dt
    accel = MAX_ACCEL * throttle - MAX_BRAKE * brake
    if v > 0.0:
        accel -= ROLLING_DECEL + DRAG_COEF * v
    v_new = min(V_MAX, max(0.0, v + accel * dt))
    return replace(ego, x=x, y=y, heading=wrap_angle(ego.heading + dtheta), speed=v_new, yaw_rate=dtheta / dt)


def _blocked_gap(points: np.ndarray, me: tuple[int, ...], positions: np.ndarray, halves: np.ndarray, corridor: float) -> float:
    """Smallest along-path distance to another agent inside the corridor ahead."""
    d = np.linalg.norm(points[:, None, :] - positions[None, :, :], axis=2)
    d[:, list(me)] = np.inf
    inside = d < corridor + halves[None, :]
    if not inside.any():
        return math.inf
    rows = np.argmax(inside, axis=0)
    hit = inside.any(axis=0)
    return float(np.min(rows[hit]))


def _advance_traffic(state: WorldState, dt: float) -> tuple[list[VehicleState], list[float]]:
    n = len(state.traffic_vehicles)
    if n == 0:
        return [], []
    others = [state.ego] + state.traffic_vehicles + state.pedestrians
    now = np.array([[a.x, a.y] for a in others])
    # constant-velocity look-ahead catches agents about to cut across the path
    vel = np.array([[a.speed * math.cos(a.heading), a.speed * math.sin(a.heading)] for a in others])
    positions = np.concatenate([now, now + vel * PREDICTION_HORIZON])
    halves = np.tile(np.array([a.half_extents[1] for a in others]), 2)
    m = len(others)
    new_vehicles, new_s = [], []
    for k, (veh, path, s, cruise) in enumerate(
        zip(state.traffic_vehicles, state.vehicle_paths, state.vehicle_s, state.vehicle_cruise)
    ):
        ahead = path.points_ahead(s + veh.half_extents[0], 12.0, 1.0)
        gap = _blocked_gap(ahead, (k + 1, k + 1 + m), positions, halves, corridor=1.2)
        if gap < 3.0:
            target = 0.0
        elif gap < 10.0:
            target = cruise * (gap - 3.0) / 7.0
        else:
            target = cruise
        accel = min(2.0, max(-6.0, (target - veh.speed) / dt))
        v = max(0.0, veh.speed + accel * dt)
        s_new = s + v * dt
        if s_new >= path.length:
            s_new, v = path.length, 0.0
        x, y, h = path.pose_at(s_new)
        dh = wrap_angle(h - veh.heading)
        new_vehicles.append(replace(veh, x=x, y=y, heading=h, speed=v, yaw_rate=dh / dt))
        new_s.append(s_new)
    return new_vehicles, new_s


def _advance_pedestrians(state: WorldState, dt: float) -> tuple[list[VehicleState], list[float]]:
    out, out_s = [], []
    for ped, path, s, v in zip(state.pedestrians, state.pedestrian_paths, state.pedestrian_s, state.pedestrian_speed):
        s_new = s + v * dt
        x, y, h = path.pose_at(s_new)
        out.append(replace(ped, x=x, y=y, heading=h, speed=v, yaw_rate=0.0))
        out_s.append(s_new)
    return out, out_s


def step(state: WorldState, ego_controls: tuple[float, float, float], dt: float = 0.1) -> WorldState:
    """Advance the world by ``dt``; returns a new state and leaves ``state`` untouched."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    steer, throttle, brake = ego_controls
    ego = advance_ego(state.ego, steer, throttle, brake, dt)
    vehicles, vs = _advance_traffic(state, dt)
    peds, ps = _advance_pedestrians(state, dt)
    return replace(
        state,
        time=state.time + dt,
        frame=state.frame + 1,
        ego=ego,
        traffic_vehicles=vehicles,
        vehicle_s=vs,
        pedestrians=peds,
        pedestrian_s=ps,
    )


class CollisionReport(enum.Enum):
    NONE = "none"
    AGENT = "ego-vs-agent"
    OFF_ROAD = "ego-off-road"


def check_collision(state: WorldState) -> CollisionReport:
    ego = state.ego
    reach = math.hypot(*ego.half_extents) + math.hypot(*VEHICLE_HALF)
    for agent in state.agents:
        if abs(agent.x - ego.x) > reach or abs(agent.y - ego.y) > reach:
            continue
        if _boxes_overlap(ego, agent):
            return CollisionReport.AGENT
    if state.town.distance_to_road(ego.x, ego.y) > SHOULDER:
        return CollisionReport.OFF_ROAD
    return CollisionReport.NONE

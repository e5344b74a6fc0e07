"""Route planning on the lane graph and the per-position navigation command."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from ..commands import NavCommand
from .town import PlanningError, TownMap

ACTIVATION_RADIUS = 15.0
TURNS = (NavCommand.TURN_LEFT, NavCommand.TURN_RIGHT)


@dataclass
class RouteSpec:
    start_pose: tuple[float, float, float]
    goal: tuple[float, float]
    waypoints: list[int]
    per_segment_command: list[NavCommand]
    points: np.ndarray = field(repr=False)
    commands: np.ndarray = field(repr=False)
    route_id: int = -1

    @property
    def arclength(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.points, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def command_at_index(self, i: int) -> NavCommand:
        return NavCommand(int(self.commands[i]))

    @property
    def n_turns(self) -> int:
        return sum(1 for c in self.per_segment_command if c in TURNS)

    def to_dict(self) -> dict:
        return {
            "route_id": self.route_id,
            "start_pose": [float(v) for v in self.start_pose],
            "goal": [float(v) for v in self.goal],
        }


def _dedupe(points: list[np.ndarray]) -> np.ndarray:
    pts = np.concatenate(points, axis=0)
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-6
    return pts[keep]


def _segment(p0: np.ndarray, p1: np.ndarray, step: float = 0.5) -> np.ndarray:
    n = max(2, int(math.ceil(np.linalg.norm(p1 - p0) / step)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) * p0 + t * p1


def _lane_sequence(town: TownMap, start_lane: int, s0: float, goal_lane: int, s1: float) -> list[int]:
    if start_lane == goal_lane and s1 >= s0:
        return [start_lane]
    g = town.lane_graph
    # node weights are carried on edges: weight = connector + next lane length
    dist, paths = nx.single_source_dijkstra(g, start_lane, weight="weight")
    if goal_lane != start_lane:
        if goal_lane not in paths:
            raise PlanningError(f"goal lane {goal_lane} unreachable from lane {start_lane}")
        return paths[goal_lane]
    loops = [(dist[p] + g[p][start_lane]["weight"], p) for p in g.predecessors(start_lane) if p in dist]
    if not loops:
        raise PlanningError("goal behind the start with no loop back")
    _, p = min(loops)
    return paths[p] + [start_lane]


def plan_route(town: TownMap, start: tuple[float, float, float], goal: tuple[float, float]) -> RouteSpec:
    """Shortest lane-graph route from a start pose to a goal point."""
    start_lane, s0, lat0 = town.project(start[0], start[1], start[2])
    goal_lane, s1, lat1 = town.project(goal[0], goal[1])
    if abs(lat0) > town.lane_width or abs(lat1) > town.lane_width:
        raise PlanningError("start or goal is not on a mapped lane")
    seq = _lane_sequence(town, start_lane, s0, goal_lane, s1)

    pieces: list[np.ndarray] = []
    seg_cmds: list[NavCommand] = []
    conns = []
    for i, lid in enumerate(seq):
        lane = town.lanes[lid]
        a = s0 if i == 0 else 0.0
        b = s1 if i == len(seq) - 1 else lane.length
        pieces.append(_segment(lane.point_at(a), lane.point_at(b)))
        if i + 1 < len(seq):
            conn = town.connectors[(lid, seq[i + 1])]
            pieces.append(conn.points)
            seg_cmds.append(conn.command)
            conns.append(conn)
        else:
            seg_cmds.append(NavCommand.LANE_FOLLOW)
    points = _dedupe(pieces)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])

    commands = np.full(len(points), int(NavCommand.LANE_FOLLOW), dtype=np.int64)
    for conn in conns:
        if conn.command == NavCommand.LANE_FOLLOW:
            continue
        node = town.nodes[conn.node]
        # locate the connector inside the path by its end point
        end_idx = int(np.argmin(np.linalg.norm(points - conn.points[-1], axis=1)))
        start_idx = int(np.argmin(np.linalg.norm(points[: end_idx + 1] - conn.points[0], axis=1)))
        near = start_idx + int(np.argmin(np.linalg.norm(points[start_idx : end_idx + 1] - node, axis=1)))
        active = (s >= s[near] - ACTIVATION_RADIUS) & (s <= s[end_idx])
        commands[active] = int(conn.command)
    return RouteSpec(
        start_pose=(float(start[0]), float(start[1]), float(start[2])),
        goal=(float(goal[0]), float(goal[1])),
        waypoints=list(seq),
        per_segment_command=seg_cmds,
        points=points,
        commands=commands,
    )


class RouteTracker:
    """Monotone progress along a route; avoids snapping across intersections."""

    def __init__(self, route: RouteSpec, back: int = 10, ahead: int = 60):
        self.route = route
        self.s = route.arclength
        self.idx = 0
        self.back = back
        self.ahead = ahead

    def update(self, x: float, y: float) -> int:
        lo = max(0, self.idx - self.back)
        hi = min(len(self.route.points), self.idx + self.ahead)
        window = self.route.points[lo:hi]
        d = np.linalg.norm(window - np.array([x, y]), axis=1)
        self.idx = lo + int(np.argmin(d))
        return self.idx

    def lateral_error(self, x: float, y: float) -> float:
        """Signed distance to the route, positive when the point is right of the path."""
        i = self.idx
        pts = self.route.points
        j = min(i + 1, len(pts) - 1)
        k = max(j - 1, 0)
        t = pts[j] - pts[k]
        n = np.linalg.norm(t)
        if n < 1e-9:
            return 0.0
        t = t / n
        rel = np.array([x, y]) - pts[k]
        return float(rel @ np.array([-t[1], t[0]]))

    @property
    def command(self) -> NavCommand:
        return self.route.command_at_index(self.idx)

    @property
    def remaining(self) -> float:
        return float(self.s[-1] - self.s[self.idx])


def sample_routes(town: TownMap, kind: str, n: int, seed: int) -> list[RouteSpec]:
    """Deterministic route roster: ``straight`` (no turns or curves), ``one_turn``, ``navigation``."""
    rng = np.random.default_rng(seed)
    routes: list[RouteSpec] = []
    seen = set()
    attempts = 0
    while len(routes) < n:
        attempts += 1
        if attempts > 5000:
            raise PlanningError(f"could not sample {n} {kind} routes in {town.town_id}")
        lane = town.lanes[int(rng.integers(len(town.lanes)))]
        s_start = float(rng.uniform(2.0, min(12.0, lane.length / 3)))
        p = lane.point_at(s_start)
        start = (float(p[0]), float(p[1]), lane.heading)
        target = {"straight": (45.0, 110.0), "one_turn": (50.0, 130.0), "navigation": (140.0, 320.0)}[kind]
        want = float(rng.uniform(*target))
        goal = _walk(town, lane.id, s_start, want, rng, straight_only=(kind == "straight"))
        if goal is None:
            continue
        try:
            route = plan_route(town, start, goal)
        except PlanningError:
            continue
        curves = sum(1 for c, w in zip(route.per_segment_command, route.waypoints) if c == NavCommand.LANE_FOLLOW)
        curves -= 1  # the final segment
        if kind == "straight" and (route.n_turns or curves):
            continue
        if kind == "one_turn" and not (route.n_turns == 1 and curves == 0):
            continue
        if kind == "navigation" and route.n_turns < 2:
            continue
        key = (round(start[0], 1), round(start[1], 1), round(goal[0], 1), round(goal[1], 1))
        if key in seen:
            continue
        seen.add(key)
        route.route_id = len(routes)
        routes.append(route)
    return routes


def _walk(town: TownMap, lane_id: int, s0: float, distance: float, rng, straight_only: bool):
    travelled = town.lanes[lane_id].length - s0
    current = lane_id
    while travelled < distance:
        succ = list(town.lane_graph.successors(current))
        if straight_only:
            succ = [v for v in succ if town.connectors[(current, v)].command == NavCommand.STRAIGHT]
        if not succ:
            break
        nxt = int(succ[int(rng.integers(len(succ)))])
        travelled += town.connectors[(current, nxt)].length + town.lanes[nxt].length
        current = nxt
    if current == lane_id:
        return None
    lane = town.lanes[current]
    overshoot = max(0.0, travelled - distance)
    s_goal = float(np.clip(lane.length - overshoot, 4.0, lane.length - 4.0))
    p = lane.point_at(s_goal)
    return (float(p[0]), float(p[1]))

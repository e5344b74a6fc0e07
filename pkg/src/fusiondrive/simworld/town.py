"""Procedural town layouts: a grid of two-lane roads with a directed lane graph.

Map frame: x points east, y points south (screen convention), headings are
measured from +x towards +y. With this choice a positive heading change is a
right turn, which matches the positive-is-right steering convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import networkx as nx
import numpy as np

from ..commands import NavCommand

LANE = 0
ROAD_LINE = 1
SIDEWALK = 2
AGENT = 3
OTHER = 4
CLASS_NAMES = ("lane", "road_line", "sidewalk", "vehicle_or_pedestrian", "other")
N_CLASSES = len(CLASS_NAMES)


class PlanningError(RuntimeError):
    pass


@dataclass
class TownSpec:
    """Generator parameters for a town; the layout is a pure function of these."""

    town_id: str
    grid: tuple[int, int]
    spacing: tuple[float, float]
    seed: int
    removed_roads: int = 0
    lane_width: float = 3.5
    sidewalk_band: tuple[float, float] = (0.0, 3.0)
    setback: float = 8.0
    palette: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["spacing"] = list(self.spacing)
        d["sidewalk_band"] = list(self.sidewalk_band)
        d["palette"] = {k: list(v) for k, v in self.palette.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TownSpec":
        d = dict(d)
        d["grid"] = tuple(d["grid"])
        d["spacing"] = tuple(float(v) for v in d["spacing"])
        d["sidewalk_band"] = tuple(float(v) for v in d.get("sidewalk_band", (0.0, 3.0)))
        d["palette"] = {k: tuple(float(c) for c in v) for k, v in d.get("palette", {}).items()}
        return cls(**d)


TRAIN_TOWN = TownSpec(
    town_id="train_town",
    grid=(5, 4),
    spacing=(50.0, 80.0),
    seed=1101,
    removed_roads=5,
    palette={
        "lane": (0.32, 0.32, 0.34),
        "road_line": (0.92, 0.90, 0.80),
        "sidewalk": (0.62, 0.58, 0.54),
        "other": (0.30, 0.46, 0.26),
        "sky": (0.62, 0.76, 0.92),
    },
)

TEST_TOWN = TownSpec(
    town_id="test_town",
    grid=(4, 3),
    spacing=(45.0, 65.0),
    seed=2202,
    removed_roads=2,
    palette={
        "lane": (0.28, 0.29, 0.31),
        "road_line": (0.95, 0.95, 0.95),
        "sidewalk": (0.70, 0.64, 0.60),
        "other": (0.52, 0.44, 0.36),
        "sky": (0.66, 0.74, 0.86),
    },
)

BUILTIN_TOWNS = {TRAIN_TOWN.town_id: TRAIN_TOWN, TEST_TOWN.town_id: TEST_TOWN}


@dataclass
class Lane:
    id: int
    road: int
    from_node: int
    to_node: int
    start: np.ndarray
    end: np.ndarray

    @property
    def direction(self) -> np.ndarray:
        d = self.end - self.start
        return d / np.linalg.norm(d)

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))

    @property
    def heading(self) -> float:
        d = self.direction
        return math.atan2(d[1], d[0])

    def point_at(self, s: float) -> np.ndarray:
        return self.start + self.direction * s


@dataclass
class Connector:
    from_lane: int
    to_lane: int
    node: int
    command: NavCommand
    points: np.ndarray

    @property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


@dataclass
class TownMap:
    spec: TownSpec
    nodes: np.ndarray
    roads: list[tuple[int, int]]
    lanes: list[Lane]
    connectors: dict[tuple[int, int], Connector]
    lane_graph: nx.DiGraph

    @property
    def town_id(self) -> str:
        return self.spec.town_id

    @property
    def lane_width(self) -> float:
        return self.spec.lane_width

    @property
    def road_half_width(self) -> float:
        return self.spec.lane_width

    @property
    def sidewalk_band(self) -> tuple[float, float]:
        return self.spec.sidewalk_band

    @property
    def intersections(self) -> dict[int, dict[tuple[int, int], NavCommand]]:
        """Nodes where an incoming lane has a choice of exits, with per-exit turn labels."""
        out: dict[int, dict[tuple[int, int], NavCommand]] = {}
        for key, conn in self.connectors.items():
            if conn.command != NavCommand.LANE_FOLLOW:
                out.setdefault(conn.node, {})[key] = conn.command
        return out

    def node_degree(self, node: int) -> int:
        return sum(1 for a, b in self.roads if node in (a, b))

    @property
    def road_length(self) -> float:
        return float(sum(np.linalg.norm(self.nodes[a] - self.nodes[b]) for a, b in self.roads))

    def road_rects(self) -> np.ndarray:
        """Axis-aligned road rectangles (cx, cy, hx, hy) including the intersection squares."""
        hw = self.road_half_width
        rects = []
        for a, b in self.roads:
            pa, pb = self.nodes[a], self.nodes[b]
            c = 0.5 * (pa + pb)
            half = 0.5 * np.abs(pb - pa)
            rects.append((c[0], c[1], half[0] + hw, half[1] + hw))
        return np.asarray(rects, dtype=float)

    def classify_ground(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Semantic label of ground points (lane, road_line, sidewalk or other)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        hw = self.road_half_width
        stripe_half = 0.1
        dist = np.full(x.shape, np.inf)
        on_line = np.zeros(x.shape, dtype=bool)
        for (a, b), (cx, cy, hx, hy) in zip(self.roads, self.road_rects()):
            dx = np.abs(x - cx) - hx
            dy = np.abs(y - cy) - hy
            d = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
            dist = np.minimum(dist, d)
            # centre line, stopping short of the intersection squares
            horizontal = abs(self.nodes[a][1] - self.nodes[b][1]) < 1e-9
            if horizontal:
                along, across, half_len = np.abs(x - cx), np.abs(y - cy), hx - 2 * hw - 1.0
            else:
                along, across, half_len = np.abs(y - cy), np.abs(x - cx), hy - 2 * hw - 1.0
            on_line |= (across <= stripe_half) & (along <= half_len)
        lo, hi = self.sidewalk_band
        labels = np.full(x.shape, OTHER, dtype=np.uint8)
        labels[(dist > lo) & (dist <= hi)] = SIDEWALK
        on_road = dist <= 0.0
        labels[on_road] = LANE
        labels[on_road & on_line] = ROAD_LINE
        return labels

    def distance_to_road(self, x: float, y: float) -> float:
        rects = self.road_rects()
        dx = np.abs(x - rects[:, 0]) - rects[:, 2]
        dy = np.abs(y - rects[:, 1]) - rects[:, 3]
        return float(np.min(np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))))

    def project(self, x: float, y: float, heading: float | None = None) -> tuple[int, float, float]:
        """Nearest lane (optionally heading-compatible) -> (lane id, arc length, signed lateral).

        Lateral offset is positive to the right of the lane direction.
        """
        best = None
        p = np.array([x, y], dtype=float)
        for lane in self.lanes:
            d = lane.direction
            if heading is not None and math.cos(heading - lane.heading) < 0.5:
                continue
            rel = p - lane.start
            s = float(np.clip(rel @ d, 0.0, lane.length))
            foot = lane.start + d * s
            dist = float(np.linalg.norm(p - foot))
            if best is None or dist < best[0]:
                right = np.array([-d[1], d[0]])
                best = (dist, lane.id, s, float((p - foot) @ right))
        if best is None:
            raise PlanningError("no lane compatible with the requested pose")
        return best[1], best[2], best[3]


def _bezier(p0: np.ndarray, p1: np.ndarray, p2: np.ndarray, step: float = 0.5) -> np.ndarray:
    approx = np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1)
    n = max(2, int(math.ceil(approx / step)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _line(p0: np.ndarray, p1: np.ndarray, step: float = 0.5) -> np.ndarray:
    n = max(2, int(math.ceil(np.linalg.norm(p1 - p0) / step)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) * p0 + t * p1


def _grid_layout(spec: TownSpec) -> tuple[np.ndarray, list[tuple[int, int]]]:
    rng = np.random.default_rng(spec.seed)
    nx_, ny_ = spec.grid
    lo, hi = spec.spacing
    xs = np.concatenate([[0.0], np.cumsum(np.round(rng.uniform(lo, hi, nx_ - 1)))])
    ys = np.concatenate([[0.0], np.cumsum(np.round(rng.uniform(lo, hi, ny_ - 1)))])
    nodes = np.array([(x, y) for y in ys for x in xs], dtype=float)

    def idx(i: int, j: int) -> int:
        return j * nx_ + i

    roads = []
    for j in range(ny_):
        for i in range(nx_):
            if i + 1 < nx_:
                roads.append((idx(i, j), idx(i + 1, j)))
            if j + 1 < ny_:
                roads.append((idx(i, j), idx(i, j + 1)))

    removed = 0
    # edge removal keeps the graph connected and every node at degree >= 2
    order = rng.permutation(len(roads))
    candidates = [roads[k] for k in order]
    for road in candidates:
        if removed >= spec.removed_roads:
            break
        remaining = [r for r in roads if r != road]
        g = nx.Graph()
        g.add_nodes_from(range(len(nodes)))
        g.add_edges_from(remaining)
        if min(dict(g.degree()).values()) < 2 or not nx.is_connected(g):
            continue
        roads = remaining
        removed += 1
    return nodes, roads


def build_town(spec: TownSpec | str) -> TownMap:
    if isinstance(spec, str):
        try:
            spec = BUILTIN_TOWNS[spec]
        except KeyError:
            raise ValueError(f"unknown town {spec!r}") from None
    nodes, roads = _grid_layout(spec)
    half_lane = spec.lane_width / 2.0
    lanes: list[Lane] = []
    for r, (a, b) in enumerate(roads):
        for u, v in ((a, b), (b, a)):
            d = nodes[v] - nodes[u]
            d = d / np.linalg.norm(d)
            right = np.array([-d[1], d[0]])
            start = nodes[u] + d * spec.setback + right * half_lane
            end = nodes[v] - d * spec.setback + right * half_lane
            lanes.append(Lane(len(lanes), r, u, v, start, end))

    connectors: dict[tuple[int, int], Connector] = {}
    graph = nx.DiGraph()
    for lane in lanes:
        graph.add_node(lane.id, length=lane.length)
    for lin in lanes:
        exits = [lo for lo in lanes if lo.from_node == lin.to_node and lo.to_node != lin.from_node]
        for lout in exits:
            din, dout = lin.direction, lout.direction
            cross = din[0] * dout[1] - din[1] * dout[0]
            if len(exits) == 1:
                cmd = NavCommand.LANE_FOLLOW
            elif cross > 0.5:
                cmd = NavCommand.TURN_RIGHT
            elif cross < -0.5:
                cmd = NavCommand.TURN_LEFT
            else:
                cmd = NavCommand.STRAIGHT
            if abs(cross) < 0.5:
                pts = _line(lin.end, lout.start)
            else:
                # corner of the two lane centre lines
                a_mat = np.array([din, -dout]).T
                t = np.linalg.solve(a_mat, lout.start - lin.end)
                corner = lin.end + din * t[0]
                pts = _bezier(lin.end, corner, lout.start)
            conn = Connector(lin.id, lout.id, lin.to_node, cmd, pts)
            connectors[(lin.id, lout.id)] = conn
            graph.add_edge(lin.id, lout.id, weight=conn.length + lout.length, command=cmd)
    return TownMap(spec, nodes, roads, lanes, connectors, graph)

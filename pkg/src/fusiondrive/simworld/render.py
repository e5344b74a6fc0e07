"""Analytic ray-casting camera: RGB, normalized metric depth and semantic labels."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .town import AGENT, LANE, OTHER, ROAD_LINE, SIDEWALK, TownMap
from .world import VehicleState, WorldState

_AGENT_COLORS = np.array(
    [
        [0.75, 0.10, 0.10],
        [0.10, 0.25, 0.70],
        [0.85, 0.85, 0.85],
        [0.10, 0.10, 0.10],
        [0.80, 0.60, 0.10],
        [0.20, 0.55, 0.25],
    ]
)
_PEDESTRIAN_COLOR = np.array([0.55, 0.25, 0.55])


@dataclass(frozen=True)
class CameraConfig:
    image_width: int = 800
    image_height: int = 600
    horizontal_fov: float = 90.0
    mount_height: float = 1.4
    pitch: float = 0.0
    far_plane: float = 100.0

    def __post_init__(self):
        if self.far_plane <= 0:
            raise ValueError("far_plane must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image size must be positive")

    @property
    def focal(self) -> float:
        return (self.image_width / 2.0) / math.tan(math.radians(self.horizontal_fov) / 2.0)

    def to_dict(self) -> dict:
        return asdict(self)


def _hash2(ix: np.ndarray, iy: np.ndarray, salt: float) -> np.ndarray:
    h = np.sin(ix * 127.1 + iy * 311.7 + salt * 74.7) * 43758.5453
    return h - np.floor(h)


def camera_rays(ego: VehicleState, cam: CameraConfig) -> tuple[np.ndarray, np.ndarray]:
    """Camera origin (3,) and unit ray directions (H, W, 3) in the world frame (z up)."""
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    fwd = np.array([c, s, 0.0])
    right = np.array([-s, c, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    p = math.radians(cam.pitch)
    fwd_p = math.cos(p) * fwd + math.sin(p) * down
    down_p = math.cos(p) * down - math.sin(p) * fwd
    w, h, f = cam.image_width, cam.image_height, cam.focal
    a = (np.arange(w) + 0.5 - w / 2.0) / f
    b = (np.arange(h) + 0.5 - h / 2.0) / f
    dirs = fwd_p[None, None, :] + a[None, :, None] * right[None, None, :] + b[:, None, None] * down_p[None, None, :]
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    origin = np.array([ego.x + ego.half_extents[0] * c, ego.y + ego.half_extents[0] * s, cam.mount_height])
    return origin, dirs


def ray_box_distance(origin: np.ndarray, dirs: np.ndarray, box: VehicleState) -> np.ndarray:
    """Slab-method entry distance of unit rays into an oriented box on the ground; inf on miss."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    rel = origin - np.array([box.x, box.y, box.height / 2.0])
    o = np.array([rel[0] * c + rel[1] * s, -rel[0] * s + rel[1] * c, rel[2]])
    d = np.stack(
        [dirs[..., 0] * c + dirs[..., 1] * s, -dirs[..., 0] * s + dirs[..., 1] * c, dirs[..., 2]], axis=-1
    )
    half = np.array([box.half_extents[0], box.half_extents[1], box.height / 2.0])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # rays parallel to a slab: inside -> unconstrained, outside -> miss
    parallel = d == 0.0
    inside = np.abs(o) <= half
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (near <= far) & (far > 0.0)
    return np.where(hit, np.maximum(near, 0.0), np.inf)


def _box_window(origin: np.ndarray, ego_heading: float, cam: CameraConfig, box: VehicleState):
    """Pixel window (r0, r1, c0, c1) covering the projected box, or None when off-screen."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    hl, hw = box.half_extents
    xs = np.array([hl, hl, -hl, -hl]) * c - np.array([hw, -hw, -hw, hw]) * s + box.x
    ys = np.array([hl, hl, -hl, -hl]) * s + np.array([hw, -hw, -hw, hw]) * c + box.y
    pts = np.concatenate(
        [np.stack([xs, ys, np.zeros(4)], 1), np.stack([xs, ys, np.full(4, box.height)], 1)]
    ) - origin
    ce, se = math.cos(ego_heading), math.sin(ego_heading)
    p = math.radians(cam.pitch)
    fwd = np.array([ce, se, 0.0])
    down = np.array([0.0, 0.0, -1.0])
    fwd_p = math.cos(p) * fwd + math.sin(p) * down
    down_p = math.cos(p) * down - math.sin(p) * fwd
    right = np.array([-se, ce, 0.0])
    z = pts @ fwd_p
    h, w = cam.image_height, cam.image_width
    if np.all(z <= 1e-3):
        return None
    if np.any(z <= 1e-3):
        return 0, h, 0, w
    u = (pts @ right) / z * cam.focal + w / 2.0
    v = (pts @ down_p) / z * cam.focal + h / 2.0
    c0, c1 = int(max(0, math.floor(u.min()) - 1)), int(min(w, math.ceil(u.max()) + 1))
    r0, r1 = int(max(0, math.floor(v.min()) - 1)), int(min(h, math.ceil(v.max()) + 1))
    if c0 >= c1 or r0 >= r1:
        return None
    return r0, r1, c0, c1


def render_observation(state: WorldState, cam: CameraConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(rgb HxWx3 in [0,1], depth HxW in [0,1], semantic HxW uint8)``."""
    town: TownMap = state.town
    origin, dirs = camera_rays(state.ego, cam)
    h, w = dirs.shape[:2]

    dz = dirs[..., 2]
    with np.errstate(divide="ignore"):
        t_ground = np.where(dz < 0.0, cam.mount_height / -dz, np.inf)
    t_hit = t_ground.copy()
    agent_idx = np.full((h, w), -1, dtype=np.int64)

    agents = state.agents
    fwd = np.array([math.cos(state.ego.heading), math.sin(state.ego.heading)])
    for k, agent in enumerate(agents):
        rel = np.array([agent.x, agent.y]) - origin[:2]
        dist = float(np.linalg.norm(rel))
        reach = math.hypot(*agent.half_extents)
        if dist - reach > cam.far_plane or rel @ fwd < -reach:
            continue
        win = _box_window(origin, state.ego.heading, cam, agent)
        if win is None:
            continue
        r0, r1, c0, c1 = win
        t = ray_box_distance(origin, dirs[r0:r1, c0:c1], agent)
        sub_t = t_hit[r0:r1, c0:c1]
        closer = t < sub_t
        sub_t[closer] = t[closer]
        agent_idx[r0:r1, c0:c1][closer] = k

    ground = np.isfinite(t_hit) & (agent_idx < 0)
    semantic = np.full((h, w), OTHER, dtype=np.uint8)
    gx = origin[0] + t_hit[ground] * dirs[..., 0][ground]
    gy = origin[1] + t_hit[ground] * dirs[..., 1][ground]
    semantic[ground] = town.classify_ground(gx, gy)
    semantic[agent_idx >= 0] = AGENT

    depth = np.minimum(t_hit, cam.far_plane) / cam.far_plane
    depth = np.clip(depth, 0.0, 1.0).astype(np.float32)

    palette = town.spec.palette
    base = {
        LANE: palette.get("lane", (0.3, 0.3, 0.3)),
        ROAD_LINE: palette.get("road_line", (0.9, 0.9, 0.9)),
        SIDEWALK: palette.get("sidewalk", (0.6, 0.6, 0.6)),
        OTHER: palette.get("other", (0.3, 0.45, 0.3)),
    }
    sky = np.asarray(palette.get("sky", (0.6, 0.75, 0.9)))
    rgb = np.empty((h, w, 3))
    rgb[...] = sky
    ground_rgb = np.empty((len(gx), 3))
    labels = semantic[ground]
    for cls, col in base.items():
        ground_rgb[labels == cls] = col

    weather = state.weather
    tex = _hash2(np.floor(gx * 2.0), np.floor(gy * 2.0), 1.0) - 0.5
    ground_rgb += 2.0 * weather.texture_noise_sigma * tex[:, None]
    if weather.ground_gloss > 0:
        puddle = (_hash2(np.floor(gx / 2.5), np.floor(gy / 2.5), 7.0) < 0.3) & (labels <= ROAD_LINE)
        g = weather.ground_gloss * puddle[:, None]
        ground_rgb = (1.0 - g) * ground_rgb + g * np.minimum(1.0, sky * 1.15)
    rgb[ground] = ground_rgb

    hit_agents = agent_idx >= 0
    if hit_agents.any():
        n_veh = len(state.traffic_vehicles)
        idx = agent_idx[hit_agents]
        cols = np.where((idx < n_veh)[:, None], _AGENT_COLORS[idx % len(_AGENT_COLORS)], _PEDESTRIAN_COLOR)
        # darker faces further up the box give a little shading
        rgb[hit_agents] = cols * (0.85 + 0.15 * dirs[..., 2][hit_agents, None].clip(-1, 0) * -1)

    rgb *= np.asarray(weather.tint)
    noise_rng = np.random.default_rng([state.seed & 0xFFFFFFFF, state.frame])
    rgb += noise_rng.normal(0.0, weather.texture_noise_sigma * 0.5, size=rgb.shape)
    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)
    return rgb, depth, semantic

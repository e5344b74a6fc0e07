"""Closed-loop benchmark harness: episodes, success rates, trajectory RMSE and ablations."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from .commands import ControlCommand, NavCommand
from .control import PidState, pid_update
from .datapipe.transforms import preprocess
from .model import DrivingNet, ModelConfig
from .simworld import (
    AutopilotConfig,
    CameraConfig,
    CollisionReport,
    RouteSpec,
    RouteTracker,
    TEST_WEATHERS,
    TRAIN_WEATHERS,
    V_MAX,
    WorldState,
    autopilot_action,
    build_town,
    check_collision,
    render_observation,
    sample_routes,
    spawn_scenario,
    step,
)
from .training import LossWeights, TrainConfig

log = logging.getLogger(__name__)

KMH10 = 10.0 / 3.6
STYLES = ("corl2017", "nocrash")
VARIANTS = ("MSFSU", "MSF", "SU")


class FailureReason(str, Enum):
    NONE = "none"
    TIMEOUT = "timeout"
    COLLISION = "collision"
    ERROR = "error"


@dataclass(frozen=True)
class TaskSpec:
    name: str
    route_kind: str
    n_vehicles: int = 0
    n_pedestrians: int = 0

    @property
    def static(self) -> bool:
        return self.n_vehicles == 0 and self.n_pedestrians == 0


CORL2017_TASKS = (
    TaskSpec("straight", "straight"),
    TaskSpec("one_turn", "one_turn"),
    TaskSpec("navigation", "navigation"),
    TaskSpec("nav_dynamic", "navigation", 10, 5),
)
NOCRASH_TASKS = (
    TaskSpec("empty", "navigation"),
    TaskSpec("regular", "navigation", 10, 5),
    TaskSpec("dense", "navigation", 25, 15),
)


@dataclass
class BenchmarkSpec:
    style: str = "corl2017"
    town_id: str = "train_town"
    weathers: tuple[str, ...] = TRAIN_WEATHERS
    tasks: tuple[TaskSpec, ...] = CORL2017_TASKS
    n_routes: int = 25
    repetitions: int = 3
    seed: int = 0
    route_seed: int = 11
    goal_radius: float = 2.0
    dt: float = 0.1

    def __post_init__(self):
        self.weathers = tuple(self.weathers)
        self.tasks = tuple(t if isinstance(t, TaskSpec) else TaskSpec(**t) for t in self.tasks)
        if self.style not in STYLES:
            raise ValueError(f"unknown benchmark style {self.style!r}")
        if not self.tasks or not self.weathers:
            raise ValueError("benchmark needs at least one task and one weather")
        if self.n_routes < 1 or self.repetitions < 1:
            raise ValueError("n_routes and repetitions must be positive")

    @property
    def collision_fails(self) -> bool:
        return self.style == "nocrash"

    def routes(self, task: TaskSpec) -> list[RouteSpec]:
        return sample_routes(build_town(self.town_id), task.route_kind, self.n_routes, seed=self.route_seed)

    def to_dict(self) -> dict:
        return {
            "style": self.style,
            "town_id": self.town_id,
            "weathers": list(self.weathers),
            "tasks": [vars(t).copy() for t in self.tasks],
            "n_routes": self.n_routes,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "route_seed": self.route_seed,
            "goal_radius": self.goal_radius,
            "dt": self.dt,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        return cls(**d)


def make_spec(style: str, town_id: str = "train_town", weather_set: str = "train", **kw) -> BenchmarkSpec:
    """Protocol preset; ``weather_set`` is ``train`` (4 weathers) or ``test`` (2)."""
    if style not in STYLES:
        raise ValueError(f"unknown benchmark style {style!r}")
    weathers = TRAIN_WEATHERS if weather_set == "train" else TEST_WEATHERS[style]
    tasks = CORL2017_TASKS if style == "corl2017" else NOCRASH_TASKS
    return BenchmarkSpec(style=style, town_id=town_id, weathers=weathers, tasks=tasks, **kw)


@dataclass
class EpisodeResult:
    success: bool
    failure_reason: FailureReason
    trajectory: np.ndarray  # rows of (t, x, y, heading, speed, yaw_rate)
    commands_log: list[NavCommand]
    route_id: int
    seed: int
    task: str = ""
    weather: str = ""
    repetition: int = 0
    message: str = ""

    TRAJECTORY_COLUMNS = ("t", "x", "y", "heading", "speed", "yaw_rate")

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.TRAJECTORY_COLUMNS + ("command",))
        for row, cmd in zip(self.trajectory, self.commands_log):
            w.writerow([f"{v:.9g}" for v in row] + [cmd.label])
        return buf.getvalue()


class Agent(Protocol):
    def reset(self, route: RouteSpec) -> None: ...

    def observe(self, state: WorldState, command: NavCommand) -> tuple[np.ndarray | None, ControlCommand]: ...


class ExpertAgent:
    """The scripted autopilot behind the agent interface; it never renders."""

    def __init__(self, config: AutopilotConfig | None = None):
        self.config = config
        self.route = None
        self.tracker = None

    def reset(self, route: RouteSpec) -> None:
        self.route = route
        self.tracker = RouteTracker(route)

    def observe(self, state, command):
        return None, autopilot_action(state, self.route, self.tracker, self.config)


class ModelAgent:
    """Learned policy: renders the camera, preprocesses and queries the network."""

    def __init__(self, model: DrivingNet, camera: CameraConfig | None = None):
        self.model = model.eval()
        self.camera = camera or CameraConfig(image_width=160, image_height=120)
        cfg = model.config
        self.size = cfg.input_size
        self.use_depth = cfg.input_channels == 4

    def reset(self, route):
        pass

    def observe(self, state, command):
        rgb, depth, _ = render_observation(state, self.camera)
        # same 8-bit quantization the training tensors went through
        x = np.round(preprocess(rgb, depth, self.size, self.use_depth) * 255.0) / 255.0
        x = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None].float()
        sem, ctrl = self.model.act(x, command)
        sem = None if sem is None else sem[0].argmax(0).numpy().astype(np.uint8)
        return sem, ctrl.clipped()


def run_episode(
    agent: Agent,
    world: WorldState,
    route: RouteSpec,
    spec: BenchmarkSpec,
    seed: int,
    pid: PidState | None = None,
) -> EpisodeResult:
    """Drive one route at 1/dt FPS until goal, timeout or (nocrash) first collision."""
    pid = pid or PidState()
    dt = spec.dt
    tracker = RouteTracker(route)
    max_ticks = int(math.ceil(route.length / KMH10 / dt - 1e-9))
    state = world
    ego = state.ego
    traj = [(state.time, ego.x, ego.y, ego.heading, ego.speed, ego.yaw_rate)]
    tracker.update(ego.x, ego.y)
    commands = [tracker.command]
    reason, message = FailureReason.TIMEOUT, ""
    try:
        agent.reset(route)
        for _ in range(max_ticks):
            _, ctrl = agent.observe(state, tracker.command)
            (throttle, brake), pid = pid_update(ctrl.speed_mps(V_MAX), state.ego.speed, dt, pid)
            state = step(state, (ctrl.steer, throttle, brake), dt)
            ego = state.ego
            tracker.update(ego.x, ego.y)
            traj.append((state.time, ego.x, ego.y, ego.heading, ego.speed, ego.yaw_rate))
            commands.append(tracker.command)
            # only contact with another road user ends a nocrash episode; leaving the road costs time
            if spec.collision_fails and check_collision(state) == CollisionReport.AGENT:
                reason = FailureReason.COLLISION
                break
            if math.hypot(ego.x - route.goal[0], ego.y - route.goal[1]) < spec.goal_radius:
                reason = FailureReason.NONE
                break
    except Exception as exc:  # recorded, never propagated: one bad episode must not end the run
        reason, message = FailureReason.ERROR, f"{type(exc).__name__}: {exc}"
        log.warning("episode %s failed with %s", route.route_id, message)
    return EpisodeResult(
        success=reason == FailureReason.NONE,
        failure_reason=reason,
        trajectory=np.asarray(traj, dtype=np.float64),
        commands_log=commands,
        route_id=route.route_id,
        seed=seed,
        message=message,
    )


def success_rate(results: list[EpisodeResult]) -> float:
    if not results:
        raise ValueError("no episodes to score")
    return 100.0 * sum(r.success for r in results) / len(results)


def _resample(traj: np.ndarray, n: int) -> np.ndarray:
    t = traj[:, 0]
    u = (t - t[0]) / max(t[-1] - t[0], 1e-12)
    grid = np.linspace(0.0, 1.0, n)
    return np.stack([np.interp(grid, u, traj[:, 1]), np.interp(grid, u, traj[:, 2])], axis=1)


def episode_rmse(agent_traj: np.ndarray, expert_traj: np.ndarray) -> float:
    """Per-episode RMSE after resampling both runs to the expert's T steps over normalized time."""
    n = len(expert_traj)
    a, e = _resample(agent_traj, n), _resample(expert_traj, n)
    return float(np.sqrt(np.mean(np.sum((a - e) ** 2, axis=1))))


def trajectory_rmse(agent_episodes: list[EpisodeResult], expert_episodes: list[EpisodeResult]) -> float:
    """Mean over successful episodes of the per-episode trajectory RMSE, in meters."""
    if len(agent_episodes) != len(expert_episodes):
        raise ValueError("agent and expert episode lists must pair up")
    pairs = [(a, e) for a, e in zip(agent_episodes, expert_episodes) if a.success and e.success]
    if not pairs:
        raise ValueError("no successful episodes to compare")
    return float(np.mean([episode_rmse(a.trajectory, e.trajectory) for a, e in pairs]))


def integrate_yaw(trajectory: np.ndarray) -> float:
    """Heading reconstructed from the initial heading and the logged yaw rates."""
    t = trajectory[:, 0]
    return float(trajectory[0, 3] + np.sum(trajectory[1:, 5] * np.diff(t)))


@dataclass
class TaskRow:
    task: str
    episodes: int
    successes: int
    success_rate: float
    success_std: float
    rmse: float
    n_e: int


@dataclass
class BenchmarkReport:
    spec: BenchmarkSpec
    rows: list[TaskRow] = field(default_factory=list)
    episodes: list[EpisodeResult] = field(default_factory=list)
    label: str = ""

    COLUMNS = ("variant", "task", "episodes", "successes", "success_rate", "success_std", "rmse", "n_e")

    def row(self, task: str) -> TaskRow:
        for r in self.rows:
            if r.task == task:
                return r
        raise KeyError(task)

    def csv_rows(self) -> list[list[str]]:
        return [
            [self.label, r.task, str(r.episodes), str(r.successes), f"{r.success_rate:.6f}",
             f"{r.success_std:.6f}", "" if math.isnan(r.rmse) else f"{r.rmse:.9f}", str(r.n_e)]
            for r in self.rows
        ]

    def to_csv(self) -> str:
        return rows_to_csv(self.COLUMNS, self.csv_rows())

    def write(self, directory: Path) -> Path:
        """Report CSV plus one trajectory CSV per episode and an index of outcomes."""
        directory = Path(directory)
        arch = directory / "episodes"
        arch.mkdir(parents=True, exist_ok=True)
        index = []
        for ep in self.episodes:
            name = episode_name(ep)
            (arch / f"{name}.csv").write_text(ep.trajectory_csv())
            index.append([name, ep.task, ep.route_id, ep.weather, str(ep.repetition), str(ep.seed),
                          str(int(ep.success)), ep.failure_reason.value, ep.message])
        cols = ("episode", "task", "route_id", "weather", "repetition", "seed", "success", "failure_reason", "message")
        (directory / "episodes.csv").write_text(rows_to_csv(cols, index))
        path = directory / "report.csv"
        path.write_text(self.to_csv())
        return path


def rows_to_csv(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def episode_name(ep: EpisodeResult) -> str:
    return f"{ep.task}_r{ep.repetition}_{ep.route_id}_{ep.weather}"


def read_trajectory(path: Path) -> tuple[np.ndarray, list[NavCommand]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty trajectory file {path}")
    traj = np.array([[float(r[c]) for c in EpisodeResult.TRAJECTORY_COLUMNS] for r in rows])
    return traj, [NavCommand.parse(r["command"]) for r in rows]


def _episode_seed(base: int, rep: int, task: int, route: int, weather: int) -> int:
    return int(np.random.default_rng([base, rep, task, route, weather]).integers(2**31 - 1))


def _run_task(agent, spec, town, task_idx, task, routes, pid=None, progress=None) -> list[EpisodeResult]:
    out = []
    for rep in range(spec.repetitions):
        for w_idx, weather in enumerate(spec.weathers):
            for r_idx, route in enumerate(routes):
                seed = _episode_seed(spec.seed, rep, task_idx, r_idx, w_idx)
                world = spawn_scenario(
                    town, task.n_vehicles, task.n_pedestrians, weather, seed, ego_pose=route.start_pose
                )
                ep = run_episode(agent, world, route, spec, seed, pid)
                ep.task, ep.weather, ep.repetition = task.name, weather, rep
                out.append(ep)
                if progress:
                    progress(ep)
    return out


def run_benchmark(
    agent: Agent,
    spec: BenchmarkSpec,
    label: str = "",
    pid: PidState | None = None,
    expert: ExpertAgent | None = None,
    progress=None,
) -> BenchmarkReport:
    """Every task x weather x route x repetition; RMSE against the expert on static tasks."""
    town = build_town(spec.town_id)
    report = BenchmarkReport(spec=spec, label=label)
    expert = expert or ExpertAgent()
    for t_idx, task in enumerate(spec.tasks):
        routes = spec.routes(task)
        eps = _run_task(agent, spec, town, t_idx, task, routes, pid, progress)
        report.episodes.extend(eps)
        per_rep = [success_rate([e for e in eps if e.repetition == k]) for k in range(spec.repetitions)]
        rmse, n_e = math.nan, 0
        if task.static:
            ref = eps if isinstance(agent, ExpertAgent) else _run_task(expert, spec, town, t_idx, task, routes, pid)
            n_e = sum(a.success and e.success for a, e in zip(eps, ref))
            if n_e:
                rmse = trajectory_rmse(eps, ref)
        report.rows.append(
            TaskRow(
                task=task.name,
                episodes=len(eps),
                successes=sum(e.success for e in eps),
                success_rate=float(np.mean(per_rep)),
                success_std=float(np.std(per_rep)),
                rmse=rmse,
                n_e=n_e,
            )
        )
    return report


def make_ablation(
    variant: str, model_config: ModelConfig, train_config: TrainConfig, weights: LossWeights | None = None
) -> tuple[ModelConfig, TrainConfig, LossWeights]:
    """MSFSU is the full model; MSF drops the decoder and its loss; SU drops the depth channel."""
    weights = weights or LossWeights()
    if variant == "MSFSU":
        return model_config, train_config, weights
    if variant == "MSF":
        return replace(model_config, use_decoder=False, input_channels=4), train_config, replace(weights, lambda3=0.0)
    if variant == "SU":
        return replace(model_config, use_decoder=True, input_channels=3), train_config, weights
    raise ValueError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")


def plot_episodes(episodes: dict[str, np.ndarray], out_dir: Path, route: RouteSpec | None = None) -> list[Path]:
    """Trajectory overlay and yaw-rate traces, one PNG each."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 6))
    if route is not None:
        ax.plot(route.points[:, 0], route.points[:, 1], color="0.7", lw=4, label="route")
    for name, traj in episodes.items():
        ax.plot(traj[:, 1], traj[:, 2], label=name)
    ax.set_aspect("equal")
    ax.invert_yaxis()  # map y points south
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend()
    traj_path = out_dir / "trajectory.png"
    fig.savefig(traj_path, dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(8, 3))
    for name, traj in episodes.items():
        ax.plot(traj[:, 0], traj[:, 5], label=name)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("yaw rate [rad/s]")
    ax.legend()
    fig.tight_layout()
    yaw_path = out_dir / "yaw_rate.png"
    fig.savefig(yaw_path, dpi=100)
    plt.close(fig)
    return [traj_path, yaw_path]


def replay_frames(
    trajectory: np.ndarray,
    spec: BenchmarkSpec,
    task: TaskSpec,
    route: RouteSpec,
    weather: str,
    seed: int,
    camera: CameraConfig,
    out_dir: Path,
    stride: int = 5,
) -> list[Path]:
    """Re-render an archived episode: traffic is re-simulated from the seed, the ego follows the log."""
    import cv2

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    town = build_town(spec.town_id)
    state = spawn_scenario(town, task.n_vehicles, task.n_pedestrians, weather, seed, ego_pose=route.start_pose)
    paths = []
    for k, row in enumerate(trajectory):
        if k:
            state = step(state, (0.0, 0.0, 0.0), spec.dt)
            ego = replace(state.ego, x=row[1], y=row[2], heading=row[3], speed=row[4], yaw_rate=row[5])
            state = replace(state, ego=ego)
        if k % stride:
            continue
        rgb, _, _ = render_observation(state, camera)
        path = out_dir / f"frame_{k:05d}.png"
        cv2.imwrite(str(path), np.round(rgb[..., ::-1] * 255).astype(np.uint8))
        paths.append(path)
    return paths

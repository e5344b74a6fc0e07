import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from fusiondrive.commands import ControlCommand, NavCommand
from fusiondrive.evalbench import (
    CORL2017_TASKS,
    KMH10,
    NOCRASH_TASKS,
    BenchmarkSpec,
    EpisodeResult,
    ExpertAgent,
    FailureReason,
    ModelAgent,
    TaskSpec,
    integrate_yaw,
    make_ablation,
    make_spec,
    plot_episodes,
    read_trajectory,
    replay_frames,
    run_benchmark,
    run_episode,
    success_rate,
    trajectory_rmse,
)
from fusiondrive.model import DrivingNet, ModelConfig, count_parameters
from fusiondrive.simworld import CameraConfig, VehicleState, sample_routes, spawn_scenario
from fusiondrive.simworld.world import ScriptedPath, _boxes_overlap, wrap_angle
from fusiondrive.training import LossWeights, TrainConfig


class ScriptedAgent:
    def __init__(self, steer=0.0, speed=1.0):
        self.ctrl = ControlCommand(steer, speed)

    def reset(self, route):
        pass

    def observe(self, state, command):
        return None, self.ctrl


def _ep(success=True, traj=None, route_id=0):
    traj = np.zeros((3, 6)) if traj is None else traj
    reason = FailureReason.NONE if success else FailureReason.TIMEOUT
    return EpisodeResult(success, reason, traj, [NavCommand.LANE_FOLLOW] * len(traj), route_id, 0)


def _line(n, dx=0.0, dy=0.0, t_end=None):
    t = np.linspace(0.0, t_end or (n - 1) * 0.1, n)
    traj = np.zeros((n, 6))
    traj[:, 0] = t
    traj[:, 1] = np.linspace(0, 50, n) + dx
    traj[:, 2] = np.sin(np.linspace(0, 3, n)) + dy
    return traj


@pytest.fixture(scope="module")
def straight(train_town):
    return sample_routes(train_town, "straight", 1, seed=1)[0]


def _spec(**kw):
    return BenchmarkSpec(**{"weathers": ("clear_afternoon",), "n_routes": 2, "repetitions": 1, **kw})


# --- specs ------------------------------------------------------------------------


def test_protocol_presets():
    corl, nocrash = make_spec("corl2017"), make_spec("nocrash", weather_set="test")
    assert [t.name for t in corl.tasks] == ["straight", "one_turn", "navigation", "nav_dynamic"]
    assert [t.name for t in nocrash.tasks] == ["empty", "regular", "dense"]
    assert corl.n_routes == 25 and len(corl.weathers) == 4 and len(nocrash.weathers) == 2
    assert not corl.collision_fails and nocrash.collision_fails
    assert (NOCRASH_TASKS[1].n_vehicles, NOCRASH_TASKS[1].n_pedestrians) == (10, 5)
    assert (NOCRASH_TASKS[2].n_vehicles, NOCRASH_TASKS[2].n_pedestrians) == (25, 15)
    assert BenchmarkSpec.from_dict(corl.to_dict()) == corl
    with pytest.raises(ValueError):
        make_spec("carla")
    with pytest.raises(ValueError):
        BenchmarkSpec(n_routes=0)


# --- episodes -------------------------------------------------------------------------


def test_expert_completes_straight_route(train_town, straight):
    world = spawn_scenario(train_town, 0, 0, "clear_afternoon", 0, ego_pose=straight.start_pose)
    ep = run_episode(ExpertAgent(), world, straight, _spec(), seed=0)
    assert ep.success and ep.failure_reason == FailureReason.NONE
    assert np.all(np.diff(ep.trajectory[:, 0]) > 0)
    assert len(ep.commands_log) == len(ep.trajectory)
    end = ep.trajectory[-1, 1:3]
    assert math.dist(end, straight.goal) < 2.0


def test_standing_agent_times_out(train_town, straight):
    world = spawn_scenario(train_town, 0, 0, "clear_afternoon", 0, ego_pose=straight.start_pose)
    ep = run_episode(ScriptedAgent(speed=0.0), world, straight, _spec(), seed=0)
    assert not ep.success and ep.failure_reason == FailureReason.TIMEOUT
    assert len(ep.trajectory) - 1 == math.ceil(straight.length / KMH10 / 0.1 - 1e-9)
    assert ep.trajectory[-1, 0] == pytest.approx(straight.length / KMH10, abs=0.1)


def _parked_ahead(town, route, distance):
    world = spawn_scenario(town, 0, 0, "clear_afternoon", 0, ego_pose=route.start_pose)
    ego = world.ego
    fwd = np.array([math.cos(ego.heading), math.sin(ego.heading)])
    p = ego.position + fwd * distance
    car = VehicleState(float(p[0]), float(p[1]), ego.heading)
    path = ScriptedPath.from_points(np.stack([p, p + fwd * 1e-3]))
    return replace(world, traffic_vehicles=[car], vehicle_paths=[path], vehicle_s=[0.0], vehicle_cruise=[0.0]), car


def test_nocrash_collision_at_first_overlap(train_town, straight):
    world, car = _parked_ahead(train_town, straight, 25.0)
    ep = run_episode(ScriptedAgent(speed=0.6), world, straight, _spec(style="nocrash"), seed=0)
    assert ep.failure_reason == FailureReason.COLLISION and not ep.success
    # replay the log against the parked box: the episode stops on the first overlapping tick
    hits = [
        k
        for k, row in enumerate(ep.trajectory)
        if _boxes_overlap(VehicleState(row[1], row[2], row[3]), car)
    ]
    assert hits and hits[0] == len(ep.trajectory) - 1


def test_corl_ignores_collisions(train_town, straight):
    world, _ = _parked_ahead(train_town, straight, 25.0)
    ep = run_episode(ScriptedAgent(speed=0.6), world, straight, _spec(style="corl2017"), seed=0)
    assert ep.failure_reason != FailureReason.COLLISION


def test_agent_exception_recorded(train_town, straight):
    class Broken(ScriptedAgent):
        def observe(self, state, command):
            raise RuntimeError("sensor fault")

    world = spawn_scenario(train_town, 0, 0, "clear_afternoon", 0, ego_pose=straight.start_pose)
    ep = run_episode(Broken(), world, straight, _spec(), seed=0)
    assert ep.failure_reason == FailureReason.ERROR and "sensor fault" in ep.message


def test_model_agent_outputs(train_town, straight):
    torch.manual_seed(0)
    agent = ModelAgent(DrivingNet(ModelConfig(input_size=32)), CameraConfig(image_width=64, image_height=48))
    world = spawn_scenario(train_town, 0, 0, "clear_afternoon", 0, ego_pose=straight.start_pose)
    sem, ctrl = agent.observe(world, NavCommand.LANE_FOLLOW)
    assert sem.shape == (32, 32) and -1 <= ctrl.steer <= 1 and 0 <= ctrl.speed <= 1


# --- metrics ---------------------------------------------------------------------------


@pytest.mark.parametrize("k, expected", [(25, 100.0), (0, 0.0), (23, 92.0)])
def test_success_rate_examples(k, expected):
    assert success_rate([_ep(i < k) for i in range(25)]) == pytest.approx(expected)


def test_success_rate_empty():
    with pytest.raises(ValueError):
        success_rate([])


def test_rmse_examples():
    base = _line(40)
    assert trajectory_rmse([_ep(traj=base)], [_ep(traj=base)]) == 0.0
    shifted = _line(40, dx=3.0, dy=4.0)
    assert trajectory_rmse([_ep(traj=shifted)], [_ep(traj=base)]) == pytest.approx(5.0, abs=1e-9)
    two_a = [_ep(traj=_line(30, dx=1.0)), _ep(traj=_line(30, dy=3.0))]
    two_e = [_ep(traj=_line(30)), _ep(traj=_line(30))]
    assert trajectory_rmse(two_a, two_e) == pytest.approx(2.0, abs=1e-9)


def test_rmse_counts_only_successes():
    agent = [_ep(traj=_line(20, dx=1.0)), _ep(False, traj=_line(20, dx=100.0))]
    expert = [_ep(traj=_line(20)), _ep(traj=_line(20))]
    assert trajectory_rmse(agent, expert) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        trajectory_rmse([_ep(False)], [_ep()])
    with pytest.raises(ValueError):
        trajectory_rmse([_ep()], [])


def _rmse_brute_force(agent_trajs, expert_trajs):
    """Printed formula evaluated point by point after equal-time resampling to the expert's T."""
    total = 0.0
    for a, e in zip(agent_trajs, expert_trajs):
        T = len(e)

        def at(traj, u):
            tau = (traj[:, 0] - traj[0, 0]) / (traj[-1, 0] - traj[0, 0])
            j = 0
            while j + 1 < len(traj) - 1 and tau[j + 1] < u:
                j += 1
            w = 0.0 if tau[j + 1] == tau[j] else (u - tau[j]) / (tau[j + 1] - tau[j])
            w = min(max(w, 0.0), 1.0)
            return (1 - w) * traj[j, 1] + w * traj[j + 1, 1], (1 - w) * traj[j, 2] + w * traj[j + 1, 2]

        acc = 0.0
        for t in range(T):
            u = t / (T - 1)
            (xa, ya), (xe, ye) = at(a, u), at(e, u)
            acc += (xa - xe) ** 2 + (ya - ye) ** 2
        total += math.sqrt(acc / T)
    return total / len(agent_trajs)


@given(st.integers(0, 10_000), st.integers(5, 40), st.integers(5, 40))
def test_rmse_matches_brute_force(seed, na, ne):
    rng = np.random.default_rng(seed)
    agents, experts = [], []
    for n, bucket in ((na, agents), (ne, experts)):
        for _ in range(2):
            traj = np.zeros((n, 6))
            traj[:, 0] = np.cumsum(rng.uniform(0.05, 0.2, n))
            traj[:, 1:3] = np.cumsum(rng.normal(size=(n, 2)), axis=0)
            bucket.append(traj)
    got = trajectory_rmse([_ep(traj=t) for t in agents], [_ep(traj=t) for t in experts])
    assert got == pytest.approx(_rmse_brute_force(agents, experts), abs=1e-9)


# --- full benchmark ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def expert_report():
    spec = _spec(tasks=(CORL2017_TASKS[0], CORL2017_TASKS[1]), repetitions=2)
    return run_benchmark(ExpertAgent(), spec, label="expert")


def test_expert_report(expert_report):
    assert [r.task for r in expert_report.rows] == ["straight", "one_turn"]
    for row in expert_report.rows:
        eps = [e for e in expert_report.episodes if e.task == row.task]
        assert row.episodes == len(eps) == 4
        assert row.success_rate == pytest.approx(success_rate(eps))
        assert row.successes == sum(e.success for e in eps)
        assert row.success_rate == 100.0 and row.success_std == 0.0
        assert row.rmse == 0.0 and row.n_e == 4


def test_report_is_reproducible(expert_report):
    again = run_benchmark(ExpertAgent(), expert_report.spec, label="expert")
    assert again.to_csv() == expert_report.to_csv()


def test_report_archive_and_yaw_export(expert_report, tmp_path):
    expert_report.write(tmp_path)
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert header == "variant,task,episodes,successes,success_rate,success_std,rmse,n_e"
    files = sorted((tmp_path / "episodes").glob("*.csv"))
    assert len(files) == len(expert_report.episodes)
    for f in files:
        traj, cmds = read_trajectory(f)
        assert len(cmds) == len(traj)
        assert abs(wrap_angle(integrate_yaw(traj) - traj[-1, 3])) <= 1e-4
    turn = next(e for e in expert_report.episodes if e.task == "one_turn")
    assert abs(wrap_angle(integrate_yaw(turn.trajectory) - turn.trajectory[-1, 3])) <= 1e-9
    assert abs(turn.trajectory[:, 5]).max() > 0.1  # the turn shows up in the yaw trace


def test_std_over_repetitions(monkeypatch):
    import fusiondrive.evalbench as eb

    outcomes = iter([True, True, False, True])  # rep 0: 2/2, rep 1: 1/2

    def fake_episode(agent, world, route, spec, seed, pid=None):
        ok = next(outcomes)
        return _ep(ok, traj=_line(5), route_id=route.route_id)

    monkeypatch.setattr(eb, "run_episode", fake_episode)
    rep = run_benchmark(ScriptedAgent(), _spec(tasks=(TaskSpec("regular", "straight", 1, 0),), repetitions=2))
    row = rep.rows[0]
    assert row.success_rate == pytest.approx(75.0) and row.success_std == pytest.approx(25.0)
    assert math.isnan(row.rmse) and row.n_e == 0


def test_nocrash_empty_failures_are_timeouts():
    spec = _spec(style="nocrash", tasks=(NOCRASH_TASKS[0],), n_routes=2)
    rep = run_benchmark(ScriptedAgent(steer=0.3, speed=0.5), spec)  # circles off the road
    assert all(not e.success for e in rep.episodes)
    assert all(e.failure_reason == FailureReason.TIMEOUT for e in rep.episodes)


# --- ablations and figures ------------------------------------------------------------------


def test_ablation_variants():
    base, tc = ModelConfig(input_size=64), TrainConfig()
    m, t, w = make_ablation("MSFSU", base, tc)
    assert m == base and t == tc and w == LossWeights()
    m, _, w = make_ablation("MSF", base, tc)
    assert not m.use_decoder and m.input_channels == 4 and w.lambda3 == 0.0
    assert count_parameters(DrivingNet(m).decoder) == 0
    m, _, w = make_ablation("SU", base, tc)
    assert m.use_decoder and m.input_channels == 3 and w.lambda3 == LossWeights().lambda3
    with pytest.raises(ValueError):
        make_ablation("XYZ", base, tc)


def test_plots_and_replay(expert_report, tmp_path):
    ep = next(e for e in expert_report.episodes if e.task == "one_turn")
    route = expert_report.spec.routes(expert_report.spec.tasks[1])[ep.route_id]
    paths = plot_episodes({"expert": ep.trajectory}, tmp_path, route)
    assert all(p.exists() and p.stat().st_size > 0 for p in paths)
    frames = replay_frames(
        ep.trajectory[:21], expert_report.spec, expert_report.spec.tasks[1], route, ep.weather, ep.seed,
        CameraConfig(image_width=64, image_height=48), tmp_path / "frames", stride=10,
    )
    assert [p.name for p in frames] == ["frame_00000.png", "frame_00010.png", "frame_00020.png"]

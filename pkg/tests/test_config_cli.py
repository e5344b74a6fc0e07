import json
from collections import Counter
from pathlib import Path

import pytest
import yaml

from fusiondrive.cli import main
from fusiondrive.commands import STEER_DEGREES
from fusiondrive.config import CONFIG_ENV, ConfigError, RunConfig, load_config
from fusiondrive.datapipe.storage import read_records
from fusiondrive.model import load_checkpoint

SMALL = {
    "camera": {"image_width": 64, "image_height": 48},
    "collect": {"episodes": 3},
    "model": {"input_size": 32},
    "train": {"max_epochs": 2, "batch_size": 16},
    "bench": {"n_routes": 1, "repetitions": 1, "weathers": ["clear_afternoon"]},
}


def _write_config(root: Path, extra=None) -> Path:
    data = {
        "seed": 3,
        "paths": {
            "dataset_dir": str(root / "data"),
            "checkpoint_dir": str(root / "ckpt"),
            "report_dir": str(root / "reports"),
        },
        **SMALL,
        **(extra or {}),
    }
    path = root / "run.yaml"
    path.write_text(yaml.safe_dump(data))
    return path


# --- config --------------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.dump(tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    back = load_config(_write_config(tmp_path))
    assert back.model.input_size == 32 and back.camera.image_width == 64 and back.seed == 3
    assert back.bench.weathers == ("clear_afternoon",)


def test_config_reaches_every_tunable():
    d = RunConfig().to_dict()
    assert {"kp", "ki", "kd", "integral_limit"} <= set(d["pid"])
    assert {"keep_fraction", "large_steer_copies", "slow_copies"} <= set(d["balance"])
    assert {"period", "duration", "magnitude_range"} <= set(d["collect"]["noise"])
    assert {"lambda1", "lambda2", "lambda3", "alpha", "beta", "gamma"} <= set(d["loss"])
    assert {"initial_lr", "lr_decay_factor", "lr_patience_epochs", "early_stop_patience"} <= set(d["train"])
    assert {"noise_sigma", "contrast_range", "blur_sigma_range"} <= set(d["augment"])
    assert {"goal_radius", "repetitions", "n_routes", "tasks"} <= set(d["bench"])
    assert {"min_lookahead", "stop_distance", "slow_distance", "turn_speed"} <= set(d["autopilot"])
    assert {"horizontal_fov", "mount_height", "far_plane"} <= set(d["camera"])


def test_config_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv(CONFIG_ENV, str(_write_config(tmp_path)))
    assert load_config().seed == 3
    monkeypatch.delenv(CONFIG_ENV)
    assert load_config() == RunConfig()


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {input_size: 32, wings: 2}\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad.write_text("val_fraction: 1.5\n")
    with pytest.raises(ConfigError):
        load_config(bad)


# --- command line --------------------------------------------------------------------------


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code != 0


def test_bad_override_and_config(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["prepare", "--config", str(cfg), "--set", "model.wings=3"]) == 1
    assert "unknown config key" in capsys.readouterr().err
    assert main(["prepare", "--config", str(tmp_path / "nope.yaml")]) == 1
    assert "config file not found" in capsys.readouterr().err


def test_bench_before_train(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["bench", "--config", str(cfg), "--tasks", "straight"]) == 1
    assert "run `train` first" in capsys.readouterr().err
    assert main(["train", "--config", str(cfg)]) == 1
    assert "error" in capsys.readouterr().err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = str(_write_config(root))
    assert main(["collect", "--config", cfg, "--episodes", "3", "--seed", "7"]) == 0
    assert main(["prepare", "--config", cfg, "--seed", "7"]) == 0
    assert main(["train", "--config", cfg, "--seed", "7"]) == 0
    assert main(["bench", "--config", cfg, "--seed", "7", "--variant", "MSFSU", "--tasks", "straight,one_turn"]) == 0
    return root, cfg


def test_collect_layout(pipeline):
    root, _ = pipeline
    manifest = json.loads((root / "data" / "manifest.json").read_text())
    assert [e["name"] for e in manifest["episodes"]] == ["episode_0000", "episode_0001", "episode_0002"]
    for e in manifest["episodes"]:
        assert (root / "data" / e["name"] / "records.jsonl").exists()
        assert len(read_records(root / "data" / e["name"])) == e["frames"] > 0


def test_prepare_follows_multiplicity_formula(pipeline):
    root, _ = pipeline
    prepared = json.loads((root / "data" / "prepared.json").read_text())
    counts = Counter(tuple(k) for k in prepared["train"])
    val_eps = set(prepared["val_episodes"])
    assert len(val_eps) == 1
    for name in sorted(p.name for p in (root / "data").glob("episode_*")):
        if name in val_eps:
            continue
        for rec in read_records(root / "data" / name):
            m = counts.get((name, rec["frame"]), 0)
            if rec["noise"]:
                assert m == 0
                continue
            if rec["command"] != "lane_follow":
                assert m == 1
                continue
            small = abs(rec["steer"] * STEER_DEGREES) < 5.0
            slow = 4 if rec["speed"] < 1.0 else 1
            allowed = {0, slow} if small else {7 * slow}
            assert m in allowed
    rep = prepared["balancing_report"]
    assert rep["final"] == len(prepared["train"])


def test_train_and_bench_artifacts(pipeline):
    root, _ = pipeline
    model, meta = load_checkpoint(root / "ckpt" / "MSFSU_s7.pt")
    assert meta["variant"] == "MSFSU" and model.config.input_size == 32
    assert (root / "reports" / "train_MSFSU_s7.csv").read_text().startswith("epoch,")
    bench_dir = root / "reports" / "bench_MSFSU_s7"
    rows = (bench_dir / "report.csv").read_text().splitlines()
    assert [r.split(",")[1] for r in rows[1:]] == ["straight", "one_turn"]
    assert (bench_dir / "spec.yaml").exists() and any((bench_dir / "episodes").iterdir())


def test_bench_leaves_inputs_untouched(pipeline):
    root, cfg = pipeline
    watched = [root / "ckpt" / "MSFSU_s7.pt", root / "data" / "prepared.json", root / "data" / "manifest.json"]
    before = [p.read_bytes() for p in watched]
    assert main(["bench", "--config", cfg, "--seed", "7", "--expert", "--tasks", "straight"]) == 0
    assert [p.read_bytes() for p in watched] == before


def test_replay(pipeline):
    root, cfg = pipeline
    bench_dir = root / "reports" / "bench_MSFSU_s7"
    assert main(["replay", "--config", cfg, "--bench-dir", str(bench_dir), "--stride", "50"]) == 0
    replay_dir = next((bench_dir / "replay").iterdir())
    assert (replay_dir / "trajectory.png").exists() and (replay_dir / "yaw_rate.png").exists()
    assert any((replay_dir / "frames").glob("frame_*.png"))
    assert main(["replay", "--config", cfg, "--bench-dir", str(bench_dir), "--episode", "nope"]) == 1


def test_ablate(pipeline):
    root, cfg = pipeline
    args = ["ablate", "--config", cfg, "--seed", "7", "--tasks", "straight", "--set", "train.max_epochs=1"]
    assert main(args) == 0
    for v in ("MSFSU", "MSF", "SU"):
        assert (root / "ckpt" / f"{v}_s7.pt").exists()
        assert (root / "reports" / f"bench_{v}_s7" / "report.csv").exists()
    rows = (root / "reports" / "ablation_s7.csv").read_text().splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == ["MSFSU", "MSF", "SU"]
    msf, _ = load_checkpoint(root / "ckpt" / "MSF_s7.pt")
    su, _ = load_checkpoint(root / "ckpt" / "SU_s7.pt")
    assert msf.decoder is None and su.config.input_channels == 3

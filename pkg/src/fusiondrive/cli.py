"""Command-line entry point: collect, prepare, train, bench, ablate, replay."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import ConfigError, RunConfig, load_config
from .datapipe import (
    Dataset,
    read_episode,
    read_manifest,
    record_episode,
    strip_noise,
    balance,
    write_episode,
    write_manifest,
)
from .evalbench import (
    VARIANTS,
    BenchmarkReport,
    BenchmarkSpec,
    ExpertAgent,
    ModelAgent,
    make_ablation,
    make_spec,
    plot_episodes,
    read_trajectory,
    replay_frames,
    rows_to_csv,
    run_benchmark,
)
from .model import load_checkpoint, model_summary, save_checkpoint
from .simworld import autopilot_action, build_town, sample_routes, spawn_scenario
from .training import tensorize, train_model

log = logging.getLogger("fusiondrive")

PREPARED = "prepared.json"


class MissingArtifact(RuntimeError):
    pass


def _derived_seed(*parts: int) -> int:
    return int(np.random.default_rng(list(parts)).integers(2**31 - 1))


# --- collect ------------------------------------------------------------------


def collect(cfg: RunConfig, seed: int, episodes: int, out: Path) -> dict:
    c = cfg.collect
    if episodes < 1:
        raise ValueError("--episodes must be at least 1")
    town = build_town(c.town_id)
    kinds = list(c.route_kinds)
    per_kind = [len(range(k, episodes, len(kinds))) for k in range(len(kinds))]
    routes = {
        kind: sample_routes(town, kind, n, seed=_derived_seed(seed, k)) if n else []
        for k, (kind, n) in enumerate(zip(kinds, per_kind))
    }
    expert = lambda st, rt, tr: autopilot_action(st, rt, tr, cfg.autopilot)  # noqa: E731
    entries = []
    for i in range(episodes):
        kind = kinds[i % len(kinds)]
        route = routes[kind][i // len(kinds)]
        weather = c.weathers[i % len(c.weathers)]
        ep_seed = _derived_seed(seed, 1000 + i)
        world = spawn_scenario(town, c.n_vehicles, c.n_pedestrians, weather, ep_seed, ego_pose=route.start_pose)
        samples = record_episode(
            world, route, expert, c.noise, cfg.camera, seed=ep_seed, dt=c.dt, pid=cfg.pid.state()
        )
        name = f"episode_{i:04d}"
        write_episode(out / name, samples)
        entries.append(
            {
                "name": name,
                "town_id": c.town_id,
                "route_kind": kind,
                "route_id": route.route_id,
                "weather": weather,
                "seed": ep_seed,
                "frames": len(samples),
                "noise_frames": sum(s.noise_flag for s in samples),
            }
        )
        log.info("%s: %s route %d, %s, %d frames", name, kind, route.route_id, weather, len(samples))
    manifest = {"seed": seed, "town_id": c.town_id, "camera": cfg.camera.to_dict(), "episodes": entries}
    write_manifest(out, manifest)
    return manifest


# --- prepare ------------------------------------------------------------------


def prepare(cfg: RunConfig, seed: int, root: Path) -> dict:
    """Episode-level train/val split, noise stripping, and balancing of the training part."""
    manifest = read_manifest(root)
    names = [e["name"] for e in manifest["episodes"]]
    n_val = int(round(cfg.val_fraction * len(names))) if len(names) > 1 else 0
    if cfg.val_fraction > 0 and len(names) > 1:
        n_val = max(1, n_val)
    rng = np.random.default_rng(seed)
    val_names = set(rng.choice(names, size=n_val, replace=False).tolist()) if n_val else set()

    def tagged(which):
        samples, keys = [], {}
        for name in names:
            if (name in val_names) != which:
                continue
            for frame, s in enumerate(read_episode(root / name, with_rasters=False)):
                keys[id(s)] = [name, frame]
                samples.append(s)
        return Dataset(samples, manifest.get("town_id", "")), keys

    train_ds, train_keys = tagged(False)
    val_ds, val_keys = tagged(True)
    train_ds = strip_noise(train_ds)
    if not train_ds.samples:
        raise ValueError("no noise-free training samples to balance")
    balanced = balance(train_ds, seed, cfg.balance)
    val_ds = strip_noise(val_ds)
    prepared = {
        "seed": seed,
        "balancing_report": balanced.balancing_report,
        "val_episodes": sorted(val_names),
        "train": [train_keys[id(s)] for s in balanced.samples],
        "val": [val_keys[id(s)] for s in val_ds.samples],
    }
    with open(root / PREPARED, "w") as fh:
        json.dump(prepared, fh, sort_keys=True)
    return prepared


def _load_prepared(root: Path) -> dict:
    path = root / PREPARED
    if not path.exists():
        raise MissingArtifact(f"{path} not found; run `prepare` first")
    with open(path) as fh:
        return json.load(fh)


def _materialize(root: Path, keys: list) -> Dataset:
    cache: dict[str, list] = {}
    samples = []
    for name, frame in keys:
        if name not in cache:
            cache[name] = read_episode(root / name)
        samples.append(cache[name][frame])
    return Dataset(samples)


# --- train / bench ------------------------------------------------------------


def artifact_name(variant: str, seed: int) -> str:
    return f"{variant}_s{seed}"


def train(cfg: RunConfig, seed: int, root: Path, variant: str = "MSFSU") -> tuple[Path, Path]:
    prepared = _load_prepared(root)
    mcfg, tcfg, weights = make_ablation(variant, cfg.model, replace(cfg.train, seed=seed), cfg.loss)
    use_depth = mcfg.input_channels == 4
    train_set = tensorize(_materialize(root, prepared["train"]), mcfg.input_size, use_depth)
    val_set = tensorize(_materialize(root, prepared["val"]), mcfg.input_size, use_depth)
    log.info("training %s on %d samples (%d validation)", variant, len(train_set), len(val_set))

    def progress(row):
        log.info("epoch %3d  lr %.2e  train %.4f  val %.4f", row["epoch"], row["lr"], row["train_total"], row["val_total"])

    model, report = train_model(train_set, val_set, mcfg, tcfg, weights, progress, cfg.augment)
    name = artifact_name(variant, seed)
    ckpt = Path(cfg.paths.checkpoint_dir) / f"{name}.pt"
    meta = {"variant": variant, "seed": seed, "best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss}
    save_checkpoint(ckpt, model, meta)
    csv_path = Path(cfg.paths.report_dir) / f"train_{name}.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path.write_text(report.to_csv())
    log.info("%s\nbest epoch %d, stop reason %s", model_summary(model), report.best_epoch, report.stop_reason)
    return ckpt, csv_path


def bench(cfg: RunConfig, seed: int, spec: BenchmarkSpec, label: str, checkpoint: Path | None) -> BenchmarkReport:
    spec = replace(spec, seed=seed)
    expert = ExpertAgent(cfg.autopilot)
    if checkpoint is None:
        agent = expert
    else:
        if not Path(checkpoint).exists():
            raise MissingArtifact(f"checkpoint {checkpoint} not found; run `train` first")
        model, _ = load_checkpoint(checkpoint)
        agent = ModelAgent(model, cfg.camera)

    def progress(ep):
        log.info("%s route %d %s: %s", ep.task, ep.route_id, ep.weather, ep.failure_reason.value)

    report = run_benchmark(agent, spec, label, cfg.pid.state(), expert, progress)
    out = Path(cfg.paths.report_dir) / f"bench_{artifact_name(label, seed)}"
    report.write(out)
    (out / "spec.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))
    return report


def ablate(cfg: RunConfig, seed: int, root: Path, spec: BenchmarkSpec) -> Path:
    rows = []
    for variant in VARIANTS:
        ckpt, _ = train(cfg, seed, root, variant)
        rows += bench(cfg, seed, spec, variant, ckpt).csv_rows()
    path = Path(cfg.paths.report_dir) / f"ablation_s{seed}.csv"
    path.write_text(rows_to_csv(BenchmarkReport.COLUMNS, rows))
    return path


def replay(cfg: RunConfig, bench_dir: Path, episode: str | None, out: Path, stride: int) -> list[Path]:
    spec_path = bench_dir / "spec.yaml"
    if not spec_path.exists():
        raise MissingArtifact(f"{spec_path} not found; run `bench` first")
    spec = BenchmarkSpec.from_dict(yaml.safe_load(spec_path.read_text()))
    import csv

    with open(bench_dir / "episodes.csv", newline="") as fh:
        index = list(csv.DictReader(fh))
    if not index:
        raise ValueError(f"{bench_dir} archives no episodes")
    row = index[0] if episode is None else next((r for r in index if r["episode"] == episode), None)
    if row is None:
        raise KeyError(f"episode {episode!r} not in {bench_dir / 'episodes.csv'}")
    traj, _ = read_trajectory(bench_dir / "episodes" / f"{row['episode']}.csv")
    task = next(t for t in spec.tasks if t.name == row["task"])
    route = next(r for r in spec.routes(task) if r.route_id == int(row["route_id"]))
    out = out / row["episode"]
    frames = replay_frames(traj, spec, task, route, row["weather"], int(row["seed"]), cfg.camera, out / "frames", stride)
    plots = plot_episodes({row["episode"]: traj}, out, route)
    return frames + plots


# --- argument handling ----------------------------------------------------------


def _apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return RunConfig.from_dict(data)


def _bench_spec(cfg: RunConfig, args) -> BenchmarkSpec:
    spec = cfg.bench
    if args.style or args.weather_set:
        spec = make_spec(
            args.style or spec.style,
            spec.town_id,
            args.weather_set or "train",
            n_routes=spec.n_routes,
            repetitions=spec.repetitions,
            route_seed=spec.route_seed,
            goal_radius=spec.goal_radius,
            dt=spec.dt,
        )
    if args.town:
        spec = replace(spec, town_id=args.town)
    if args.tasks:
        wanted = args.tasks.split(",")
        known = {t.name: t for t in spec.tasks}
        missing = [t for t in wanted if t not in known]
        if missing:
            raise ConfigError(f"unknown task(s) {missing} for style {spec.style}")
        spec = replace(spec, tasks=tuple(known[t] for t in wanted))
    if args.routes:
        spec = replace(spec, n_routes=args.routes)
    if args.repetitions:
        spec = replace(spec, repetitions=args.repetitions)
    return spec


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusiondrive", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config (default: $FUSIONDRIVE_CONFIG, else built-ins)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, e.g. train.max_epochs=5")
    common.add_argument("-v", "--verbose", action="store_true")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", type=Path, help="dataset directory (default: paths.dataset_dir)")
    benchopts = argparse.ArgumentParser(add_help=False)
    benchopts.add_argument("--style", choices=("corl2017", "nocrash"))
    benchopts.add_argument("--weather-set", choices=("train", "test"))
    benchopts.add_argument("--town")
    benchopts.add_argument("--tasks", help="comma-separated subset of the protocol's tasks")
    benchopts.add_argument("--routes", type=int, help="routes per task")
    benchopts.add_argument("--repetitions", type=int)

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("collect", parents=[common, data], help="record expert episodes with noise injection")
    p.add_argument("--episodes", type=int)
    sub.add_parser("prepare", parents=[common, data], help="strip noise, balance, write the training index")
    p = sub.add_parser("train", parents=[common, data], help="train a model variant")
    p.add_argument("--variant", choices=VARIANTS, default="MSFSU")
    p = sub.add_parser("bench", parents=[common, benchopts], help="closed-loop benchmark")
    who = p.add_mutually_exclusive_group()
    who.add_argument("--checkpoint", type=Path)
    who.add_argument("--variant", choices=VARIANTS)
    who.add_argument("--expert", action="store_true", help="benchmark the scripted autopilot")
    sub.add_parser("ablate", parents=[common, data, benchopts], help="train and bench MSFSU, MSF and SU")
    p = sub.add_parser("replay", parents=[common], help="render an archived episode and plot it")
    p.add_argument("--bench-dir", type=Path, required=True)
    p.add_argument("--episode", help="archived episode name (default: first)")
    p.add_argument("--out", type=Path, help="output directory (default: <bench-dir>/replay)")
    p.add_argument("--stride", type=int, default=5, help="render every n-th frame")
    return parser


def run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args.set)
    seed = cfg.seed if args.seed is None else args.seed
    torch.set_num_threads(1)  # bit-identical reruns
    root = Path(getattr(args, "data", None) or cfg.paths.dataset_dir)

    if args.command == "collect":
        manifest = collect(cfg, seed, args.episodes or cfg.collect.episodes, root)
        print(f"wrote {len(manifest['episodes'])} episodes to {root}")
    elif args.command == "prepare":
        prepared = prepare(cfg, seed, root)
        for k, v in sorted(prepared["balancing_report"].items()):
            print(f"{k:16s} {v}")
    elif args.command == "train":
        ckpt, report = train(cfg, seed, root, args.variant)
        print(f"checkpoint {ckpt}\nreport     {report}")
    elif args.command == "bench":
        spec = _bench_spec(cfg, args)
        if args.expert:
            label, ckpt = "expert", None
        else:
            label = args.variant or "MSFSU"
            ckpt = args.checkpoint or Path(cfg.paths.checkpoint_dir) / f"{artifact_name(label, seed)}.pt"
            if args.checkpoint:
                label = args.checkpoint.stem
        report = bench(cfg, seed, spec, label, ckpt)
        print(report.to_csv(), end="")
    elif args.command == "ablate":
        path = ablate(cfg, seed, root, _bench_spec(cfg, args))
        print(path.read_text(), end="")
    elif args.command == "replay":
        out = args.out or args.bench_dir / "replay"
        paths = replay(cfg, args.bench_dir, args.episode, out, args.stride)
        print(f"wrote {len(paths)} files under {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return run(args)
    except (ConfigError, MissingArtifact, FileNotFoundError, KeyError, ValueError, RuntimeError) as exc:
        print(f"fusiondrive {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

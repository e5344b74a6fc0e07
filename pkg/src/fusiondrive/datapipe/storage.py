"""On-disk dataset layout: one directory per episode plus a manifest.

episode_XXXX/
    rgb_000000.png        8-bit RGB
    depth_000000.png      16-bit, depth * 65535
    semantic_000000.png   8-bit class ids
    records.jsonl         one JSON record per frame
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from ..commands import NavCommand
from .record import Dataset, Sample

MANIFEST = "manifest.json"


def write_episode(directory: Path, samples: list[Sample]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "records.jsonl", "w") as fh:
        for i, s in enumerate(samples):
            rgb8 = np.round(np.clip(s.rgb, 0, 1) * 255).astype(np.uint8)
            d16 = np.round(np.clip(np.squeeze(s.depth), 0, 1) * 65535).astype(np.uint16)
            cv2.imwrite(str(directory / f"rgb_{i:06d}.png"), rgb8[..., ::-1])
            cv2.imwrite(str(directory / f"depth_{i:06d}.png"), d16)
            cv2.imwrite(str(directory / f"semantic_{i:06d}.png"), s.semantic_gt.astype(np.uint8))
            rec = {
                "frame": i,
                "timestamp": s.timestamp,
                "steer": s.steer_gt,
                "speed": s.speed_gt,
                "command": s.nav_command.label,
                "noise": s.noise_flag,
                "pose": list(s.pose),
                "weather": s.weather,
            }
            fh.write(json.dumps(rec) + "\n")


def read_records(directory: Path) -> list[dict]:
    with open(Path(directory) / "records.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_episode(directory: Path, with_rasters: bool = True) -> list[Sample]:
    directory = Path(directory)
    samples = []
    for rec in read_records(directory):
        i = rec["frame"]
        if with_rasters:
            bgr = cv2.imread(str(directory / f"rgb_{i:06d}.png"), cv2.IMREAD_UNCHANGED)
            rgb = bgr[..., ::-1].astype(np.float32) / 255.0
            depth = cv2.imread(str(directory / f"depth_{i:06d}.png"), cv2.IMREAD_UNCHANGED).astype(np.float32) / 65535.0
            sem = cv2.imread(str(directory / f"semantic_{i:06d}.png"), cv2.IMREAD_UNCHANGED)
        else:
            rgb = depth = sem = None
        samples.append(
            Sample(
                rgb=rgb,
                depth=depth,
                semantic_gt=sem,
                nav_command=NavCommand.parse(rec["command"]),
                steer_gt=float(rec["steer"]),
                speed_gt=float(rec["speed"]),
                noise_flag=bool(rec["noise"]),
                pose=tuple(rec["pose"]),
                timestamp=float(rec["timestamp"]),
                weather=rec.get("weather", ""),
            )
        )
    return samples


def write_manifest(root: Path, manifest: dict) -> None:
    Path(root).mkdir(parents=True, exist_ok=True)
    with open(Path(root) / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def read_manifest(root: Path) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def load_dataset(root: Path, town_id: str | None = None, with_rasters: bool = True) -> Dataset:
    """Concatenate every episode listed in the manifest (optionally one town only)."""
    manifest = read_manifest(root)
    samples: list[Sample] = []
    towns = set()
    for ep in manifest["episodes"]:
        if town_id is not None and ep["town_id"] != town_id:
            continue
        towns.add(ep["town_id"])
        samples.extend(read_episode(Path(root) / ep["name"], with_rasters))
    return Dataset(samples, town_id or ",".join(sorted(towns)))

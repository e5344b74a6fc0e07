"""Steering/speed rebalancing of lane-following samples."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..commands import NavCommand, STEER_DEGREES
from .record import Dataset, Sample


@dataclass(frozen=True)
class BalanceConfig:
    small_steer_deg: float = 5.0
    keep_fraction: float = 0.2
    large_steer_copies: int = 6
    slow_speed: float = 1.0
    slow_copies: int = 3


def _is_small(s: Sample, cfg: BalanceConfig) -> bool:
    return abs(s.steer_gt * STEER_DEGREES) < cfg.small_steer_deg


def balance(dataset: Dataset, seed: int, config: BalanceConfig | None = None) -> Dataset:
    """Downsample small-steer, upsample large-steer, then upsample slow lane-following samples.

    Copies are appended after the originals. Samples under other commands pass
    through untouched, ahead of the balanced lane-following block.
    """
    cfg = config or BalanceConfig()
    if not dataset.samples:
        raise ValueError("cannot balance an empty dataset")
    rng = np.random.default_rng(seed)
    lane = [s for s in dataset.samples if s.nav_command == NavCommand.LANE_FOLLOW]
    other = [s for s in dataset.samples if s.nav_command != NavCommand.LANE_FOLLOW]

    small_idx = [i for i, s in enumerate(lane) if _is_small(s, cfg)]
    n_keep = int(math.floor(len(small_idx) * cfg.keep_fraction + 1e-9))
    kept = set(rng.choice(small_idx, size=n_keep, replace=False).tolist()) if n_keep else set()
    small_set = set(small_idx)
    stage1 = [s for i, s in enumerate(lane) if i not in small_set or i in kept]
    n_stage1_small = len(kept)

    large = [s for s in stage1 if not _is_small(s, cfg)]
    stage2 = stage1 + large * cfg.large_steer_copies
    slow = [s for s in stage2 if s.speed_gt < cfg.slow_speed]
    stage3 = stage2 + slow * cfg.slow_copies

    report = dict(dataset.balancing_report)
    report.update(
        {
            "balance_input": len(dataset.samples),
            "lane_follow": len(lane),
            "other_commands": len(other),
            "stage1": n_stage1_small,
            "stage2": len(stage2),
            "stage3": len(stage3),
            "final": len(other) + len(stage3),
        }
    )
    return Dataset(other + stage3, dataset.town_id, report)


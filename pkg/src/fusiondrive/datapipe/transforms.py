"""Model-input preprocessing and RGB-only training augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np


def _crop_bottom(img: np.ndarray) -> np.ndarray:
    return img[img.shape[0] // 2 :]


def preprocess(rgb: np.ndarray, depth: np.ndarray | None, size: int = 96, use_depth: bool = True) -> np.ndarray:
    """Drop the top (sky) half, resize to ``size`` x ``size`` and stack R, G, B[, D].

    ``rgb`` is HxWx3 and ``depth`` HxW or HxWx1, both in [0, 1].
    """
    rgb = np.asarray(rgb, dtype=np.float32)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"rgb must be HxWx3, got {rgb.shape}")
    out = cv2.resize(_crop_bottom(rgb), (size, size), interpolation=cv2.INTER_AREA)
    if use_depth:
        if depth is None:
            raise ValueError("depth raster required when use_depth is set")
        depth = np.asarray(depth, dtype=np.float32)
        if depth.ndim == 3:
            depth = depth[..., 0]
        if depth.shape != rgb.shape[:2]:
            raise ValueError(f"depth shape {depth.shape} does not match rgb {rgb.shape[:2]}")
        d = cv2.resize(_crop_bottom(depth), (size, size), interpolation=cv2.INTER_AREA)
        out = np.concatenate([out, d[..., None]], axis=2)
    return np.clip(out, 0.0, 1.0)


def preprocess_labels(semantic: np.ndarray, size: int = 96) -> np.ndarray:
    """Same crop/resize as :func:`preprocess` with nearest-neighbour sampling."""
    return cv2.resize(_crop_bottom(np.asarray(semantic, dtype=np.uint8)), (size, size), interpolation=cv2.INTER_NEAREST)


@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.1
    noise_sigma: float = 0.02
    dropout_max_area: float = 0.1
    dropout_max_rects: int = 3
    contrast_range: tuple[float, float] = (0.8, 1.2)
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)


AUGMENTATIONS = ("gaussian_noise", "coarse_dropout", "contrast", "gaussian_blur")


def augment(rgb: np.ndarray, seed, config: AugmentConfig | None = None, return_flags: bool = False):
    """Each augmentation fires independently with the configured probability."""
    cfg = config or AugmentConfig()
    rng = np.random.default_rng(seed)
    fires = rng.random(len(AUGMENTATIONS)) < cfg.probability
    out = np.array(rgb, dtype=np.float32, copy=True)
    h, w = out.shape[:2]
    if fires[0]:
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape).astype(np.float32)
    if fires[1]:
        n = int(rng.integers(1, cfg.dropout_max_rects + 1))
        area = cfg.dropout_max_area / n * h * w
        for _ in range(n):
            frac = rng.uniform(0.3, 1.0)
            aspect = rng.uniform(0.5, 2.0)
            rh = max(1, min(h, int(np.sqrt(area * frac / aspect))))
            rw = max(1, min(w, int(area * frac / rh)))
            r0 = int(rng.integers(0, h - rh + 1))
            c0 = int(rng.integers(0, w - rw + 1))
            out[r0 : r0 + rh, c0 : c0 + rw] = 0.0
    if fires[2]:
        gain = rng.uniform(*cfg.contrast_range)
        out = (out - 0.5) * gain + 0.5
    if fires[3]:
        sigma = float(rng.uniform(*cfg.blur_sigma_range))
        out = cv2.GaussianBlur(out, (0, 0), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT)
    out = np.clip(out, 0.0, 1.0)
    if return_flags:
        return out, dict(zip(AUGMENTATIONS, map(bool, fires)))
    return out

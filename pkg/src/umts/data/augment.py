"""Pad-and-crop, horizontal flip and random erasing on H x W x 3 arrays."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class AugmentConfig:
    pad: int = 4
    flip_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    fill: tuple[float, float, float] | None = None  # per-channel; dataset mean when None

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(pad=0, flip_prob=0.0, erase_prob=0.0)


def random_crop(image, pad, rng):
    if pad <= 0:
        return image
    h, w = image.shape[:2]
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    return padded[top:top + h, left:left + w]


def hflip(image):
    return image[:, ::-1]


def erase_box(shape, area_range, aspect_range, rng, attempts=100):
    """Sample an erasing rectangle ``(top, left, h, w)`` or None."""
    h, w = shape[:2]
    area = h * w
    for _ in range(attempts):
        target = rng.uniform(*area_range) * area
        log_r = rng.uniform(math.log(aspect_range[0]), math.log(aspect_range[1]))
        ratio = math.exp(log_r)
        eh = int(round(math.sqrt(target * ratio)))
        ew = int(round(math.sqrt(target / ratio)))
        if 0 < eh < h and 0 < ew < w:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            return top, left, eh, ew
    return None


def random_erase(image, cfg: AugmentConfig, rng, fill=None):
    box = erase_box(image.shape, cfg.erase_area, cfg.erase_aspect, rng)
    if box is None:
        return image
    top, left, eh, ew = box
    out = image.copy()
    value = fill if fill is not None else (cfg.fill if cfg.fill is not None else 0.5)
    out[top:top + eh, left:left + ew] = np.asarray(value, dtype=image.dtype)
    return out


def augment(image, cfg: AugmentConfig, rng: np.random.Generator, fill=None) -> np.ndarray:
    """Crop, flip, then erase. Output keeps shape and the [0, 1] range."""
    out = random_crop(np.asarray(image), cfg.pad, rng)
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = hflip(out)
    if cfg.erase_prob > 0 and rng.random() < cfg.erase_prob:
        out = random_erase(out, cfg, rng, fill)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)

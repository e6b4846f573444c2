"""Speed perturbation, SpecAugment masking, random erasing and crop/pad.

All functions take an explicit :class:`~paraforge.rng.Rng` and never modify
their input in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dsp import AudioClip, FeatureMatrix, resample
from .errors import ConfigError
from .rng import Rng


@dataclass(frozen=True)
class SpecAugmentConfig:
    F: int = 12
    T: int = 20
    n_freq_masks: int = 1
    n_time_masks: int = 1
    mask_value: float = 0.0

    def __post_init__(self):
        if self.F < 0 or self.T < 0:
            raise ConfigError(f"mask widths must be non-negative, got F={self.F}, T={self.T}")
        if self.n_freq_masks < 1 or self.n_time_masks < 1:
            raise ConfigError("n_freq_masks and n_time_masks must be >= 1")


@dataclass(frozen=True)
class RandomErasingConfig:
    apply_prob: float = 0.5
    area_ratio_min: float = 0.02
    area_ratio_max: float = 0.2
    aspect_ratio_min: float = 0.3
    aspect_ratio_max: float = 3.33
    max_attempts: int = 10

    def __post_init__(self):
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ConfigError(f"apply_prob {self.apply_prob} outside [0, 1]")
        if not 0.0 < self.area_ratio_min < self.area_ratio_max < 1.0:
            raise ConfigError("need 0 < area_ratio_min < area_ratio_max < 1")
        if not 0.0 < self.aspect_ratio_min <= self.aspect_ratio_max:
            raise ConfigError("need 0 < aspect_ratio_min <= aspect_ratio_max")


@dataclass(frozen=True)
class SpeedPerturbConfig:
    factors: tuple = (0.9, 1.0, 1.1)
    target_frames: int = 98

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(float(f) for f in self.factors))
        if not self.factors:
            raise ConfigError("speed perturbation needs at least one factor")
        if any(f <= 0 for f in self.factors):
            raise ConfigError(f"speed factors must be positive, got {self.factors}")
        if self.target_frames < 1:
            raise ConfigError("target_frames must be >= 1")


def spec_augment(feat: FeatureMatrix, cfg: SpecAugmentConfig, rng: Rng,
                 return_masks: bool = False):
    """Mask frequency bands ``[f0, f0+f)`` and time bands ``[t0, t0+t)``.

    Widths are uniform on ``0..F`` / ``0..T`` inclusive; starts are uniform
    on ``[0, v-f)`` / ``[0, u-t)``. Frequency masks are drawn first.
    """
    u, v = feat.n_frames, feat.n_bins
    if cfg.F >= v:
        raise ConfigError(f"F={cfg.F} must be smaller than n_bins={v}")
    if cfg.T >= u:
        raise ConfigError(f"T={cfg.T} must be smaller than n_frames={u}")
    out = feat.data.copy()
    masks = []
    for _ in range(cfg.n_freq_masks):
        f = rng.integers(0, cfg.F + 1)
        f0 = rng.integers(0, v - f)
        out[:, f0:f0 + f] = cfg.mask_value
        masks.append(("freq", f0, f))
    for _ in range(cfg.n_time_masks):
        t = rng.integers(0, cfg.T + 1)
        t0 = rng.integers(0, u - t)
        out[t0:t0 + t, :] = cfg.mask_value
        masks.append(("time", t0, t))
    result = feat.with_data(out)
    return (result, masks) if return_masks else result


def erase_rectangle(u: int, v: int, cfg: RandomErasingConfig, rng: Rng):
    """Draw ``(top, left, height, width)`` of an erasing rectangle, or ``None``.

    Height runs along frames and width along bins. A draw that does not fit
    inside the ``u x v`` grid, or rounds to zero, is redrawn; after
    ``max_attempts`` failures ``None`` is returned.
    """
    area = u * v
    for _ in range(cfg.max_attempts):
        a = rng.uniform(cfg.area_ratio_min, cfg.area_ratio_max)
        r = rng.uniform(cfg.aspect_ratio_min, cfg.aspect_ratio_max)
        h = int(round(math.sqrt(a * area * r)))
        w = int(round(math.sqrt(a * area / r)))
        if 1 <= h <= u and 1 <= w <= v:
            return rng.integers(0, u - h + 1), rng.integers(0, v - w + 1), h, w
    return None


def random_erase(feat: FeatureMatrix, cfg: RandomErasingConfig, rng: Rng,
                 return_rect: bool = False):
    if feat.n_frames < 2 or feat.n_bins < 2:
        raise ConfigError(f"random erasing needs at least a 2x2 matrix, got {feat.data.shape}")
    rect = None
    if rng.random() < cfg.apply_prob:
        rect = erase_rectangle(feat.n_frames, feat.n_bins, cfg, rng)
    if rect is None:
        result = feat.with_data(feat.data.copy())
    else:
        top, left, h, w = rect
        out = feat.data.copy()
        out[top:top + h, left:left + w] = 0
        result = feat.with_data(out)
    return (result, rect) if return_rect else result


def speed_perturb_set(clip: AudioClip, cfg: SpeedPerturbConfig) -> list[AudioClip]:
    return [resample(clip, f) for f in cfg.factors]


def crop_or_pad(feat: FeatureMatrix, target_frames: int, rng: Rng | None = None,
                mode: str = "train") -> FeatureMatrix:
    """Random (train) or centered (eval) crop; repeat-tile when too short."""
    if target_frames < 1:
        raise ConfigError("target_frames must be >= 1")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    n = feat.n_frames
    if n == target_frames:
        return feat.with_data(feat.data.copy())
    if n > target_frames:
        if mode == "train":
            if rng is None:
                raise ConfigError("train-mode cropping needs an rng")
            start = rng.integers(0, n - target_frames + 1)
        else:
            start = (n - target_frames) // 2
        return feat.with_data(feat.data[start:start + target_frames].copy())
    reps = -(-target_frames // n)
    return feat.with_data(np.tile(feat.data, (reps, 1))[:target_frames])

"""Feature loading shared by both flows, global normalization and the augmentation audit."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..dsp import AudioClip, FbankConfig, log_fbank, read_wav
from ..errors import DataError, DegenerateInputError, IntegrityError


def parallel_map(fn, items, jobs: int = 1) -> list:
    """Order-preserving map over worker threads (``jobs <= 1`` runs inline)."""
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def load_clip(manifest, record, sample_rate_hz: int) -> AudioClip:
    clip = read_wav(manifest.resolve(record.path))
    if clip.sample_rate_hz != sample_rate_hz:
        raise DataError(f"{record.path}: sample rate {clip.sample_rate_hz} Hz, config expects {sample_rate_hz} Hz")
    return clip


def fbank_array(clip: AudioClip, cfg: FbankConfig) -> np.ndarray:
    return log_fbank(clip, cfg).data


@dataclass
class GlobalNorm:
    """Per-bin mean and standard deviation pooled over every training frame."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, feats) -> "GlobalNorm":
        if not feats:
            raise DegenerateInputError("cannot fit normalization statistics on no features")
        n_bins = feats[0].shape[1]
        total = sum(f.shape[0] for f in feats)
        if total < 2:
            raise DegenerateInputError("normalization needs at least two frames")
        mean = np.zeros(n_bins)
        for f in feats:
            mean += f.sum(axis=0, dtype=np.float64)
        mean /= total
        var = np.zeros(n_bins)
        for f in feats:
            var += ((f - mean) ** 2).sum(axis=0)
        std = np.sqrt(var / total)
        return cls(mean, np.where(std > 0, std, 1.0))

    def apply(self, feat: np.ndarray) -> np.ndarray:
        return (feat - self.mean) / self.std

    def tensors(self) -> dict:
        return {"norm_mean": self.mean, "norm_std": self.std}

    @classmethod
    def from_tensors(cls, tensors: dict) -> "GlobalNorm":
        try:
            return cls(np.asarray(tensors["norm_mean"], np.float64), np.asarray(tensors["norm_std"], np.float64))
        except KeyError as exc:
            raise IntegrityError(f"checkpoint lacks normalization tensor {exc}") from None


@dataclass
class AuditLog:
    """Which augmentations touched which item, per mode."""

    entries: list = field(default_factory=list)

    def record(self, mode: str, ident: str, ops) -> None:
        self.entries.append((mode, ident, tuple(ops)))

    def check_eval_clean(self) -> None:
        dirty = [(i, ops) for mode, i, ops in self.entries if mode == "eval" and ops]
        if dirty:
            raise IntegrityError(f"augmentation reached eval features: {dirty[:3]}")

    def counts(self) -> dict:
        out: dict = {}
        for mode, _, ops in self.entries:
            for op in ops or ("none",):
                out[(mode, op)] = out.get((mode, op), 0) + 1
        return out

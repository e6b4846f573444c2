"""Audio ingestion and log mel filterbank features."""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DegenerateInputError,
    EmptyInputError,
    FormatError,
    IntegrityError,
    UnsupportedFormatError,
)

PREEMPHASIS = 0.97
MAX_FEATURE_WIDTH = 4096


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise EmptyInputError("audio clip must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(self.samples)):
            raise DegenerateInputError("audio clip contains non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise ConfigError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class FbankConfig:
    window_ms: float = 25.0
    shift_ms: float = 10.0
    n_mels: int = 64
    fft_size: int = 512
    fmin_hz: float = 20.0
    fmax_hz: float = 7600.0
    log_floor: float = 1e-10
    preemphasis: float = PREEMPHASIS

    def __post_init__(self):
        if self.window_ms <= 0 or self.shift_ms <= 0:
            raise ConfigError("window_ms and shift_ms must be positive")
        if self.window_ms < self.shift_ms:
            raise ConfigError(f"window_ms ({self.window_ms}) < shift_ms ({self.shift_ms})")
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.fft_size < 1 or self.fft_size & (self.fft_size - 1):
            raise ConfigError(f"fft_size must be a power of two, got {self.fft_size}")
        if not 0 <= self.fmin_hz < self.fmax_hz:
            raise ConfigError(f"need 0 <= fmin_hz < fmax_hz, got {self.fmin_hz}, {self.fmax_hz}")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if not 0 <= self.preemphasis < 1:
            raise ConfigError("preemphasis must lie in [0, 1)")

    @classmethod
    def breath(cls, **overrides) -> "FbankConfig":
        """60 ms / 40 ms framing used for the breathing task (25 frames per second)."""
        return replace(cls(window_ms=60.0, shift_ms=40.0, fft_size=1024), **overrides)

    def window_samples(self, sample_rate_hz: int) -> int:
        return int(round(self.window_ms * sample_rate_hz / 1000.0))

    def shift_samples(self, sample_rate_hz: int) -> int:
        return int(round(self.shift_ms * sample_rate_hz / 1000.0))

    def check_rate(self, sample_rate_hz: int) -> None:
        if self.fmax_hz > sample_rate_hz / 2:
            raise ConfigError(f"fmax_hz {self.fmax_hz} exceeds Nyquist of {sample_rate_hz} Hz")
        if self.fft_size < self.window_samples(sample_rate_hz):
            raise ConfigError(
                f"fft_size {self.fft_size} shorter than window of "
                f"{self.window_samples(sample_rate_hz)} samples"
            )


@dataclass
class FeatureMatrix:
    """Frames x bins grid. Row ``i`` is frame ``i``."""

    data: np.ndarray
    frame_shift_ms: float = 10.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise EmptyInputError(f"feature matrix must be 2-D and non-empty, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DegenerateInputError("feature matrix contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]

    def with_data(self, data) -> "FeatureMatrix":
        return FeatureMatrix(data, self.frame_shift_ms, dict(self.meta))


# ---------------------------------------------------------------- WAV I/O

def read_wav(path) -> AudioClip:
    """Read a 16-bit PCM mono RIFF/WAVE file, scaled by 1/32768."""
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if msg.startswith("unknown format"):
            code = msg.split(":")[-1].strip()
            raise UnsupportedFormatError(f"audio_format={code}: only PCM (1) is supported") from exc
        raise FormatError(f"{path}: malformed WAVE header ({msg})") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated WAVE header") from exc
    if channels != 1:
        raise UnsupportedFormatError(f"channels={channels}: only mono is supported")
    if width != 2:
        raise UnsupportedFormatError(f"sample_width={8 * width} bits: only 16-bit PCM is supported")
    if len(raw) % 2:
        raise FormatError(f"{path}: odd-sized PCM payload")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise EmptyInputError(f"{path}: no samples")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, clip: AudioClip) -> None:
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate_hz)
        w.writeframes(to_pcm16(clip.samples).tobytes())


# ------------------------------------------------------------ filterbank

def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FbankConfig, sample_rate_hz: int) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mels, fft_size // 2 + 1)``.

    Filter ``m`` rises linearly from edge ``m`` to a peak of 1 at edge ``m + 1``
    and falls back to 0 at edge ``m + 2``, where the ``n_mels + 2`` edges are
    equally spaced in mel between ``fmin_hz`` and ``fmax_hz``.
    """
    cfg.check_rate(sample_rate_hz)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    freqs = np.arange(cfg.fft_size // 2 + 1) * sample_rate_hz / cfg.fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"mel filters {empty.tolist()} contain no FFT bin; raise fft_size or lower n_mels"
        )
    return fb


def frame_count(n_samples: int, cfg: FbankConfig, sample_rate_hz: int) -> int:
    win = cfg.window_samples(sample_rate_hz)
    if n_samples < win:
        return 0
    return (n_samples - win) // cfg.shift_samples(sample_rate_hz) + 1


def log_fbank(clip: AudioClip, cfg: FbankConfig = FbankConfig()) -> FeatureMatrix:
    sr = clip.sample_rate_hz
    fb = mel_filterbank(cfg, sr)
    win = cfg.window_samples(sr)
    hop = cfg.shift_samples(sr)
    n = frame_count(len(clip), cfg, sr)
    if n == 0:
        raise EmptyInputError(f"clip of {len(clip)} samples is shorter than one {win}-sample window")
    x = clip.samples
    if cfg.preemphasis:
        x = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]])
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n]
    spec = np.fft.rfft(frames * np.hamming(win), n=cfg.fft_size)
    power = spec.real ** 2 + spec.imag ** 2
    energies = power @ fb.T
    return FeatureMatrix(
        np.log(np.maximum(energies, cfg.log_floor)),
        frame_shift_ms=cfg.shift_ms,
        meta={"sample_rate_hz": sr},
    )


def mean_var_normalize(feat: FeatureMatrix) -> FeatureMatrix:
    """Per-bin zero mean, unit (population) variance over time; constant bins become 0."""
    if feat.n_frames < 2:
        raise DegenerateInputError("mean/variance normalization needs at least 2 frames")
    x = feat.data.astype(np.float64)
    centered = x - x.mean(axis=0)
    std = np.sqrt(np.mean(centered ** 2, axis=0))
    constant = x.max(axis=0) == x.min(axis=0)
    std[constant] = 1.0
    centered[:, constant] = 0.0
    return feat.with_data(centered / std)


def stack_frames(feat: FeatureMatrix, k: int, hop: int, max_width: int = MAX_FEATURE_WIDTH) -> FeatureMatrix:
    """Concatenate ``k`` consecutive frames every ``hop`` frames; partial tails are dropped."""
    if k < 1 or hop < 1:
        raise ConfigError(f"stack_frames needs k >= 1 and hop >= 1, got k={k}, hop={hop}")
    if k * feat.n_bins > max_width:
        raise ConfigError(f"stacked width {k * feat.n_bins} exceeds max feature width {max_width}")
    n_out = (feat.n_frames - k) // hop + 1
    if n_out < 1:
        raise EmptyInputError(f"{feat.n_frames} frames cannot fill one stack of {k}")
    windows = np.lib.stride_tricks.sliding_window_view(feat.data, k, axis=0)[::hop][:n_out]
    # sliding_window_view puts the window axis last: (n_out, bins, k)
    stacked = windows.transpose(0, 2, 1).reshape(n_out, k * feat.n_bins)
    return FeatureMatrix(stacked.copy(), feat.frame_shift_ms * hop, dict(feat.meta))


def fit_frames(feat: FeatureMatrix, n_frames: int) -> FeatureMatrix:
    """Truncate, or pad by repeating the last frame, to exactly ``n_frames``."""
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    if feat.n_frames >= n_frames:
        return feat.with_data(feat.data[:n_frames])
    pad = np.repeat(feat.data[-1:], n_frames - feat.n_frames, axis=0)
    return feat.with_data(np.concatenate([feat.data, pad]))


# ------------------------------------------------------------- resampling

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resample(clip: AudioClip, factor: float, zero_crossings: int = 16) -> AudioClip:
    """Read the clip at positions ``i * factor`` by windowed-sinc interpolation.

    ``factor > 1`` speeds the clip up (shorter, higher pitched). The sinc is
    band-limited to ``min(1, 1/factor)`` of Nyquist and Hann-windowed over
    ``zero_crossings`` lobes on each side.
    """
    if not 0.5 <= factor <= 2.0:
        raise ConfigError(f"resample factor {factor} outside [0.5, 2.0]")
    if factor == 1.0:
        return AudioClip(clip.samples.copy(), clip.sample_rate_hz)
    x = clip.samples
    n_in = x.size
    n_out = max(1, _round_half_up(n_in / factor))
    cutoff = min(1.0, 1.0 / factor)
    half = int(math.ceil(zero_crossings / cutoff))
    taps = np.arange(-half + 1, half + 1)
    out = np.empty(n_out)
    chunk = 8192
    for start in range(0, n_out, chunk):
        t = np.arange(start, min(start + chunk, n_out)) * factor
        idx = np.floor(t).astype(np.int64)[:, None] + taps
        d = t[:, None] - idx
        w = cutoff * np.sinc(cutoff * d) * 0.5 * (1.0 + np.cos(np.pi * d / half))
        w[np.abs(d) >= half] = 0.0
        valid = (idx >= 0) & (idx < n_in)
        vals = np.where(valid, x[np.clip(idx, 0, n_in - 1)], 0.0)
        out[start:start + t.size] = np.sum(w * vals, axis=1)
    return AudioClip(np.clip(out, -1.0, 1.0), clip.sample_rate_hz)


# ----------------------------------------------------- feature file format

FEATURE_MAGIC = b"PFEA"
FEATURE_VERSION = 1
_FEA_HEADER = struct.Struct("<4sHIIf")


def write_features(path, feat: FeatureMatrix) -> None:
    header = _FEA_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, feat.n_frames, feat.n_bins,
                              feat.frame_shift_ms)
    Path(path).write_bytes(header + np.ascontiguousarray(feat.data, dtype="<f4").tobytes())


def read_features(path) -> FeatureMatrix:
    blob = Path(path).read_bytes()
    if len(blob) < _FEA_HEADER.size:
        raise FormatError(f"{path}: truncated feature header")
    magic, version, n_frames, n_bins, shift = _FEA_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    payload = blob[_FEA_HEADER.size:]
    if len(payload) != 4 * n_frames * n_bins:
        raise IntegrityError(f"{path}: expected {n_frames}x{n_bins} values, got {len(payload) // 4}")
    data = np.frombuffer(payload, dtype="<f4").reshape(n_frames, n_bins).astype(np.float32)
    return FeatureMatrix(data, float(shift))

"""Seeded synthetic corpora standing in for the restricted challenge data.

Speech is a source-filter model: a glottal pulse train with a wandering F0
drives formant resonators that change every segment, mixed with fricative
noise and pauses. The mask corpus applies a high-frequency shelf attenuation
to the ``mask`` class. The breathing corpus modulates speech loudness with
the derivative of a synthetic respiratory-belt signal (louder while the
chest contracts) and adds inhalation noise while it expands.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import iirpeak, lfilter

from ..dsp import AudioClip, write_wav
from ..errors import ConfigError, FormatError, IntegrityError
from ..rng import Rng
from .manifest import Manifest, Record

BELT_MAGIC = b"PBLT"
BELT_VERSION = 1
BELT_RATE_HZ = 25.0
BELT_OFFSET_S = 0.03            # centre of the first 60 ms analysis window

# adult male F1..F3 (Hz) for five vowels
VOWELS = np.array([
    [730, 1090, 2440],
    [270, 2290, 3010],
    [300, 870, 2240],
    [530, 1840, 2480],
    [570, 840, 2410],
], dtype=np.float64)
BANDWIDTHS = (80.0, 100.0, 120.0)
FORMANT_GAINS_DB = (0.0, -4.0, -10.0)
FORMANT4_HZ, FORMANT4_GAIN_DB = 3400.0, -16.0


@dataclass(frozen=True)
class SynthSpec:
    n_speakers: int = 8
    clips_per_speaker: int = 50
    sample_rate_hz: int = 16000
    clip_seconds: float = 1.0
    mask_attenuation_db: float = 12.0
    mask_cutoff_hz: float = 1500.0
    breath_band_hz: tuple = (0.2, 0.4)
    noise_floor: float = 3e-4
    split_sizes: tuple = (4, 2, 2)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "breath_band_hz", tuple(float(b) for b in self.breath_band_hz))
        object.__setattr__(self, "split_sizes", tuple(int(s) for s in self.split_sizes))
        lo, hi = self.breath_band_hz
        if not 0.1 < lo < hi < 1.0:
            raise ConfigError(f"breath band must lie inside (0.1, 1.0) Hz, got {self.breath_band_hz}")
        if self.mask_attenuation_db <= 0:
            raise ConfigError("mask attenuation must be positive (dB)")
        if not 0 < self.mask_cutoff_hz < self.sample_rate_hz / 2:
            raise ConfigError("mask cutoff must lie below the Nyquist frequency")
        if self.n_speakers < 3 or self.clips_per_speaker < 1 or self.clip_seconds <= 0:
            raise ConfigError("need >= 3 speakers, >= 1 clip per speaker and a positive duration")
        if len(self.split_sizes) != 3 or sum(self.split_sizes) != self.n_speakers or min(self.split_sizes) < 1:
            raise ConfigError(f"split_sizes {self.split_sizes} must be three positive counts summing to n_speakers")
        if self.noise_floor < 0:
            raise ConfigError("noise_floor must be non-negative")

    @classmethod
    def breath(cls, **overrides) -> "SynthSpec":
        base = dict(n_speakers=6, clips_per_speaker=1, clip_seconds=240.0, split_sizes=(4, 1, 1))
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------- belt files

def write_belt(path, values) -> None:
    arr = np.ascontiguousarray(values, dtype="<f4").ravel()
    Path(path).write_bytes(BELT_MAGIC + struct.pack("<HI", BELT_VERSION, arr.size) + arr.tobytes())


def read_belt(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != BELT_MAGIC:
        raise FormatError(f"{path}: not a belt-signal file (bad magic)")
    if len(blob) < 10:
        raise IntegrityError(f"{path}: truncated belt header")
    version, n = struct.unpack_from("<HI", blob, 4)
    if version != BELT_VERSION:
        raise FormatError(f"{path}: unsupported belt version {version}")
    if len(blob) != 10 + 4 * n:
        raise IntegrityError(f"{path}: belt payload holds {(len(blob) - 10) // 4} values, header says {n}")
    return np.frombuffer(blob, dtype="<f4", offset=10).astype(np.float32)


# ------------------------------------------------------------ signal pieces

def _resonator(freqs, bws, sr):
    """Cascade of two-pole resonators as one ``(b, a)`` pair with unit DC gain."""
    a = np.array([1.0])
    for f, bw in zip(freqs, bws):
        r = np.exp(-np.pi * bw / sr)
        a = np.convolve(a, [1.0, -2 * r * np.cos(2 * np.pi * f / sr), r * r])
    return np.array([a.sum()]), a


def _formant(x, freq, bw, sr):
    b, a = iirpeak(freq, freq / bw, fs=sr)
    return lfilter(b, a, x)


def _smooth_walk(rng: Rng, n: int, corr: int) -> np.ndarray:
    """Slowly varying noise in roughly [-1, 1] (white noise low-passed by a moving average)."""
    w = rng.normal(size=n + corr)
    kernel = np.hanning(corr + 2)[1:-1]
    out = np.convolve(w, kernel / np.sqrt(np.sum(kernel ** 2)), mode="valid")[:n]
    return np.tanh(out / 2)


def _voice_source(rng: Rng, n: int, sr: int, f0: float, tilt: float) -> np.ndarray:
    contour = f0 * (1 + 0.12 * _smooth_walk(rng, n, sr // 4))
    phase = np.cumsum(contour / sr)
    pulses = np.diff(np.floor(phase), prepend=0.0)
    pulses *= 1 + 0.05 * rng.normal(size=n)
    # glottal roll-off then lip radiation
    return lfilter([1.0, -1.0], [1.0, -2 * tilt, tilt * tilt], pulses)


def _segments(rng: Rng, n: int, sr: int, min_ms: float, max_ms: float, weights) -> list:
    """Consecutive ``(start, stop, kind)`` spans; kind indexes ``weights``."""
    out, pos = [], 0
    cum = np.cumsum(weights) / np.sum(weights)
    while pos < n:
        length = int(rng.uniform(min_ms, max_ms) * sr / 1000)
        kind = int(np.searchsorted(cum, rng.random(), side="right"))
        out.append((pos, min(n, pos + length), min(kind, len(weights) - 1)))
        pos += length
    return out


def _crossfade(gates: np.ndarray, sr: int) -> np.ndarray:
    ramp = np.hanning(int(0.01 * sr) + 2)[1:-1]
    ramp /= ramp.sum()
    return np.stack([np.convolve(g, ramp, mode="same") for g in gates])


def speech(rng: Rng, n: int, sr: int, voice: dict, pause_weight: float = 0.15) -> np.ndarray:
    """Speech-like signal of ``n`` samples for a speaker described by ``voice``.

    ``voice`` holds ``f0`` (Hz), ``tract`` (formant scale), ``tilt`` (source
    pole radius) and ``gains`` (per-vowel level jitter).
    """
    src = _voice_source(rng.split(0), n, sr, voice["f0"], voice["tilt"])
    noise = rng.split(1).normal(size=n)
    n_kinds = len(VOWELS) + 2                       # vowels, fricative, pause
    weights = [0.7 / len(VOWELS)] * len(VOWELS) + [0.15, pause_weight]
    gates = np.zeros((n_kinds, n))
    for start, stop, kind in _segments(rng.split(2), n, sr, 60, 220, weights):
        gates[kind, start:stop] = 1.0
    gates = _crossfade(gates, sr)
    out = np.zeros(n)
    f4 = _formant(src, FORMANT4_HZ * voice["tract"], 250.0, sr)
    for k, formants in enumerate(VOWELS):
        if not gates[k].any():
            continue
        vowel = sum(10 ** (g / 20) * _formant(src, f * voice["tract"], bw, sr)
                    for f, bw, g in zip(formants, BANDWIDTHS, FORMANT_GAINS_DB))
        out += voice["gains"][k] * gates[k] * (vowel + 10 ** (FORMANT4_GAIN_DB / 20) * f4)
    b, a = _resonator([4500.0 * voice["tract"]], [2000.0], sr)
    fric = lfilter(b, a, noise)
    out += 0.3 * gates[len(VOWELS)] * fric / (np.std(fric) + 1e-12) * np.std(out + 1e-12)
    return out


def shelf_attenuate(x: np.ndarray, sr: int, cutoff_hz: float, db: float) -> np.ndarray:
    """Attenuate everything above ``cutoff_hz`` by ``db`` with a half-octave cosine ramp."""
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.size, 1.0 / sr)
    octaves = np.log2(np.maximum(freqs, 1e-9) / cutoff_hz)
    ramp = np.clip(octaves / 0.5 + 0.5, 0.0, 1.0)
    gain_db = -db * 0.5 * (1 - np.cos(np.pi * ramp))
    return np.fft.irfft(spec * 10 ** (gain_db / 20), n=x.size)


def _speaker_voice(rng: Rng, gender: str) -> dict:
    base = 120.0 if gender == "m" else 210.0
    return {
        "f0": base * rng.uniform(0.85, 1.15),
        "tract": (1.0 if gender == "m" else 1.17) * rng.uniform(0.94, 1.06),
        "tilt": rng.uniform(0.93, 0.98),
        "gains": rng.uniform(0.6, 1.4, size=len(VOWELS)),
    }


def _set_level(x: np.ndarray, rng: Rng, lo_db: float = -30.0, hi_db: float = -18.0) -> np.ndarray:
    rms = np.sqrt(np.mean(x ** 2))
    target = 10 ** (rng.uniform(lo_db, hi_db) / 20)
    return x * (target / rms) if rms > 0 else x


def _finish(x: np.ndarray, rng: Rng, floor: float) -> np.ndarray:
    x = x + floor * rng.normal(size=x.size)
    return np.clip(x, -1.0, 32767 / 32768)


def _speaker_table(spec: SynthSpec):
    splits = ["train"] * spec.split_sizes[0] + ["devel"] * spec.split_sizes[1] + ["test"] * spec.split_sizes[2]
    return [(f"s{i:02d}", "f" if i % 2 == 0 else "m", splits[i]) for i in range(spec.n_speakers)]


# ------------------------------------------------------------------ corpora

def synth_mask_corpus(spec: SynthSpec, out_dir) -> Manifest:
    """Write 1-second clips, alternating ``clear``/``mask`` within each speaker."""
    out_dir = Path(out_dir)
    sr = spec.sample_rate_hz
    n = int(round(spec.clip_seconds * sr))
    root = Rng(spec.seed).split(1)
    records = []
    for s, (spk, gender, split) in enumerate(_speaker_table(spec)):
        voice = _speaker_voice(root.split(s, 0), gender)
        (out_dir / "wav" / spk).mkdir(parents=True, exist_ok=True)
        for c in range(spec.clips_per_speaker):
            rng = root.split(s, 1, c)
            label = "mask" if c % 2 else "clear"
            x = _set_level(speech(rng.split(0), n, sr, voice), rng.split(1))
            if label == "mask":
                x = shelf_attenuate(x, sr, spec.mask_cutoff_hz, spec.mask_attenuation_db)
            x = _finish(x, rng.split(2), spec.noise_floor)
            rel = f"wav/{spk}/{spk}_c{c:03d}.wav"
            write_wav(out_dir / rel, AudioClip(x, sr))
            records.append(Record(rel, split, label, spk, gender, ""))
    manifest = Manifest(records, out_dir)
    manifest.write(out_dir / "manifest.csv")
    return manifest.validate("mask")


def belt_signal(rng: Rng, n: int, band_hz) -> np.ndarray:
    """Quasi-periodic breathing trace at the belt rate, scaled to exactly [-1, 1]."""
    lo, hi = band_hz
    rate = lo + (hi - lo) * 0.5 * (1 + _smooth_walk(rng.split(0), n, int(20 * BELT_RATE_HZ)))
    phase = 2 * np.pi * np.cumsum(rate) / BELT_RATE_HZ + rng.uniform(0, 2 * np.pi)
    amp = 1 + 0.3 * _smooth_walk(rng.split(1), n, int(15 * BELT_RATE_HZ))
    # skewed cycle: inhalation is shorter than exhalation
    raw = amp * np.sin(phase + 0.35 * np.sin(phase))
    raw += 0.15 * _smooth_walk(rng.split(2), n, int(30 * BELT_RATE_HZ))
    return 2 * (raw - raw.min()) / (raw.max() - raw.min()) - 1


def breath_audio(rng: Rng, belt: np.ndarray, n: int, sr: int, voice: dict):
    """Audio whose loudness follows the belt; returns ``(audio, envelope)``."""
    times = BELT_OFFSET_S + np.arange(belt.size) / BELT_RATE_HZ
    slope = np.gradient(belt) * BELT_RATE_HZ
    slope /= np.std(slope)
    t = np.arange(n) / sr
    d = np.interp(t, times, slope)
    envelope = 1 / (1 + np.exp(3.0 * d))             # exhalation (falling belt) is loud
    x = speech(rng.split(0), n, sr, voice, pause_weight=0.05)
    x /= np.sqrt(np.mean(x ** 2))
    b, a = _resonator([1800.0], [1500.0], sr)
    hiss = lfilter(b, a, rng.split(1).normal(size=n))
    hiss /= np.sqrt(np.mean(hiss ** 2))
    inhale = np.maximum(d, 0.0) / max(d.max(), 1e-9)
    audio = 0.05 * (envelope * x + 0.15 * inhale * hiss)
    return audio, envelope


def synth_breath_corpus(spec: SynthSpec, out_dir) -> Manifest:
    """Write long clips plus belt files sampled every 40 ms (6000 values per 4 minutes)."""
    out_dir = Path(out_dir)
    sr = spec.sample_rate_hz
    n = int(round(spec.clip_seconds * sr))
    n_belt = int(round(spec.clip_seconds * BELT_RATE_HZ))
    root = Rng(spec.seed).split(2)
    records = []
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    (out_dir / "belt").mkdir(parents=True, exist_ok=True)
    for s, (spk, gender, split) in enumerate(_speaker_table(spec)):
        voice = _speaker_voice(root.split(s, 0), gender)
        for c in range(spec.clips_per_speaker):
            rng = root.split(s, 1, c)
            belt = belt_signal(rng.split(0), n_belt, spec.breath_band_hz)
            audio, _ = breath_audio(rng.split(1), belt, n, sr, voice)
            audio = _finish(audio, rng.split(2), spec.noise_floor)
            stem = f"{spk}_c{c:03d}"
            write_wav(out_dir / "wav" / f"{stem}.wav", AudioClip(audio, sr))
            write_belt(out_dir / "belt" / f"{stem}.pblt", belt)
            records.append(Record(f"wav/{stem}.wav", split, "", spk, gender, f"belt/{stem}.pblt"))
    manifest = Manifest(records, out_dir)
    manifest.write(out_dir / "manifest.csv")
    return manifest.validate("breath")

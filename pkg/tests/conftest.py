"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import numpy as np
import pytest

from paraforge.dsp import AudioClip
from paraforge.pipeline.synth import SynthSpec, synth_breath_corpus, synth_mask_corpus

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def tone(freq_hz: float, seconds: float = 1.0, sr: int = 16000, amp: float = 0.5) -> AudioClip:
    t = np.arange(int(round(seconds * sr))) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq_hz * t), sr)


def peak_hz(samples: np.ndarray, sr: int, pad: int = 1 << 20) -> float:
    spec = np.abs(np.fft.rfft(samples * np.hanning(samples.size), n=pad))
    return float(np.argmax(spec) * sr / pad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Small corpora and model sizes for the unit tests; the acceptance tests use full-size ones.
TINY_MASK = {
    "model.stage_channels": [4, 8], "model.blocks_per_stage": [1, 1], "model.embed_dim": 16,
    "optim.epochs": 2, "optim.batch_size": 16, "train.aux_epochs": 1,
}
TINY_BREATH = {
    "lstm.hidden_per_direction": 8, "lstm.dropout": 0.0, "optim.epochs": 2, "optim.batch_size": 2,
    "train.n_frames": 500,
}


def config_text(overrides: dict) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in overrides.items())


@pytest.fixture(scope="session")
def small_mask_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("mask_small")
    synth_mask_corpus(SynthSpec(n_speakers=4, clips_per_speaker=6, split_sizes=(2, 1, 1)), root)
    return root


@pytest.fixture(scope="session")
def mask_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("mask_full")
    synth_mask_corpus(SynthSpec(), root)
    return root


@pytest.fixture(scope="session")
def breath_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("breath_full")
    synth_breath_corpus(SynthSpec.breath(), root)
    return root


@pytest.fixture(scope="session")
def small_breath_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("breath_small")
    synth_breath_corpus(SynthSpec.breath(n_speakers=3, clip_seconds=20.0, split_sizes=(1, 1, 1)), root)
    return root

"""Pipeline configuration and its flat ``section.key = value`` text format.

Example::

    # comment
    dsp.n_mels = 64
    speed.factors = [0.9, 1.0, 1.1]
    optim.kind = "sgd_nesterov"

Values are Python literals (numbers, quoted strings, lists, booleans);
anything that is not a literal is taken as a bare string. Unknown sections
or keys are errors.
"""

from __future__ import annotations

import ast
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..augment import RandomErasingConfig, SpecAugmentConfig, SpeedPerturbConfig
from ..dsp import FbankConfig, frame_count
from ..errors import ConfigError
from ..nnet.lstm import BiLstmConfig
from ..nnet.optim import OptimizerConfig
from ..nnet.resnet import ResNetEmbedConfig

AUGMENTATIONS = ("speed", "specaug", "erase")
AUX_SOURCES = ("none", "gender", "speaker")


@dataclass(frozen=True)
class SvmConfig:
    C: float = 1.0
    gamma: float = 0.0          # 0 selects 1 / (dim * var)
    tol: float = 1e-3
    max_passes: int = 200

    def __post_init__(self):
        if self.C <= 0 or self.tol <= 0 or self.gamma < 0 or self.max_passes < 1:
            raise ConfigError("svm: need C > 0, tol > 0, gamma >= 0, max_passes >= 1")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    sample_rate_hz: int = 16000
    clip_seconds: float = 1.0
    augment: tuple = ("speed", "specaug")
    aux_source: str = "none"
    aux_epochs: int = 5
    fusion_source: str = "svm"
    eval_batch_size: int = 64
    # breathing task
    features: str = "fbank"
    stack_k: int = 4
    stack_hop: int = 4
    n_frames: int = 6000
    segment_frames: int = 0
    aggregation: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "augment", tuple(self.augment))
        bad = [a for a in self.augment if a not in AUGMENTATIONS]
        if bad:
            raise ConfigError(f"train.augment: unknown schemes {bad}; choose from {AUGMENTATIONS}")
        if self.aux_source not in AUX_SOURCES:
            raise ConfigError(f"train.aux_source must be one of {AUX_SOURCES}")
        if self.fusion_source not in ("svm", "softmax"):
            raise ConfigError("train.fusion_source must be 'svm' or 'softmax'")
        if self.features not in ("fbank", "stacked"):
            raise ConfigError("train.features must be 'fbank' or 'stacked'")
        if self.aggregation not in ("mean", "pooled"):
            raise ConfigError("train.aggregation must be 'mean' or 'pooled'")
        if self.n_frames < 1 or self.segment_frames < 0 or self.sample_rate_hz <= 0:
            raise ConfigError("train: n_frames >= 1, segment_frames >= 0, sample_rate_hz > 0 required")


@dataclass(frozen=True)
class PipelineConfig:
    dsp: FbankConfig = field(default_factory=FbankConfig)
    specaug: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)
    erase: RandomErasingConfig = field(default_factory=RandomErasingConfig)
    speed: SpeedPerturbConfig = field(default_factory=SpeedPerturbConfig)
    model: ResNetEmbedConfig = field(default_factory=lambda: ResNetEmbedConfig(aux_dim=100))
    lstm: BiLstmConfig = field(default_factory=BiLstmConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self, task: str = "mask") -> "PipelineConfig":
        """Cross-field checks that no single section can make on its own."""
        if task == "mask":
            if self.model.aux_fusion != "none" and self.train.aux_source == "none":
                raise ConfigError("model.aux_fusion is set but train.aux_source is 'none'")
            if self.model.aux_fusion == "none" and self.train.aux_source != "none":
                raise ConfigError("train.aux_source is set but model.aux_fusion is 'none'")
            if "specaug" in self.train.augment and self.specaug.F >= self.dsp.n_mels:
                raise ConfigError(f"specaug.F={self.specaug.F} must be below dsp.n_mels={self.dsp.n_mels}")
            if "specaug" in self.train.augment and self.specaug.T >= self.speed.target_frames:
                raise ConfigError("specaug.T must be below speed.target_frames")
            expected = frame_count(int(round(self.train.sample_rate_hz * self.train.clip_seconds)),
                                   self.dsp, self.train.sample_rate_hz)
            if self.speed.target_frames != expected:
                raise ConfigError(
                    f"speed.target_frames={self.speed.target_frames} but a {self.train.clip_seconds} s "
                    f"clip yields {expected} frames under the dsp config")
            if self.model.n_classes != 2:
                raise ConfigError("mask detection is binary: model.n_classes must be 2")
        elif task == "breath":
            shift = self.dsp.shift_ms * (self.train.stack_hop if self.train.features == "stacked" else 1)
            if abs(shift - 40.0) > 1e-9:
                raise ConfigError(f"breath features must advance 40 ms per frame, got {shift} ms")
            if self.lstm.out_dim != 1:
                raise ConfigError("breath regression predicts one value per frame: lstm.out_dim must be 1")
        else:
            raise ConfigError(f"unknown task {task!r}")
        self.dsp.check_rate(self.train.sample_rate_hz)
        return self

    def to_text(self) -> str:
        lines = []
        for section in fields(self):
            for key, value in asdict(getattr(self, section.name)).items():
                if isinstance(value, tuple):
                    value = list(value)
                lines.append(f"{section.name}.{key} = {value!r}")
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def override(self, flat: dict) -> "PipelineConfig":
        return apply_overrides(self, flat)


def breath_defaults() -> PipelineConfig:
    return PipelineConfig(
        dsp=FbankConfig.breath(),
        optim=OptimizerConfig(kind="adam", lr=1e-3, batch_size=16, epochs=100, plateau_patience=10),
    )


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        lowered = text.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        return text


def parse_flat(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def apply_overrides(cfg: PipelineConfig, flat: dict) -> PipelineConfig:
    sections = {f.name: f for f in fields(cfg)}
    grouped: dict[str, dict] = {}
    for key, value in flat.items():
        if "." not in key:
            raise ConfigError(f"config key {key!r} lacks a section prefix")
        section, name = key.split(".", 1)
        if section not in sections:
            raise ConfigError(f"unknown config section {section!r} (key {key!r})")
        known = {f.name for f in fields(getattr(cfg, section))}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        grouped.setdefault(section, {})[name] = value
    updates = {}
    for section, values in grouped.items():
        try:
            updates[section] = replace(getattr(cfg, section), **values)
        except TypeError as exc:
            raise ConfigError(f"bad value in section {section!r}: {exc}") from None
    return replace(cfg, **updates)


def load_config(path=None, task: str = "mask", overrides: dict | None = None) -> PipelineConfig:
    cfg = breath_defaults() if task == "breath" else PipelineConfig()
    if path is not None:
        cfg = apply_overrides(cfg, parse_flat(Path(path).read_text(encoding="utf-8"), str(path)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate(task)

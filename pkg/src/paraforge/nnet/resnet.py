"""Residual CNN embedding classifier with mean+std global pooling."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, ShapeError
from .core import Module, Sequential
from .layers import BatchNorm2d, Conv2d, Linear, ReLU, StatsPool

AUX_FUSIONS = ("none", "feat_level", "emb_level")


@dataclass(frozen=True)
class ResNetEmbedConfig:
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (2, 2, 2, 2)
    embed_dim: int = 128
    n_classes: int = 2
    aux_fusion: str = "none"
    aux_dim: int = 0
    bn_momentum: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if not self.stage_channels or len(self.stage_channels) != len(self.blocks_per_stage):
            raise ConfigError("stage_channels and blocks_per_stage must be non-empty and equally long")
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.aux_fusion not in AUX_FUSIONS:
            raise ConfigError(f"aux_fusion must be one of {AUX_FUSIONS}, got {self.aux_fusion!r}")
        if self.aux_fusion != "none" and self.aux_dim <= 0:
            raise ConfigError("aux_dim must be positive when aux_fusion is enabled")

    def to_dict(self):
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d


class BasicBlock(Module):
    def __init__(self, in_c, out_c, stride, rng, dtype, momentum):
        super().__init__()
        self.conv1 = Conv2d(in_c, out_c, 3, stride, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_c, momentum, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_c, out_c, 3, 1, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_c, momentum, dtype=dtype)
        self.shortcut = None
        if stride != 1 or in_c != out_c:
            self.shortcut = Sequential(Conv2d(in_c, out_c, 1, stride, padding=0, rng=rng, dtype=dtype),
                                       BatchNorm2d(out_c, momentum, dtype=dtype))
        self.relu_out = ReLU()

    def forward(self, x):
        y = self.bn2(self.conv2(self.relu1(self.bn1(self.conv1(x)))))
        return self.relu_out(y + (self.shortcut(x) if self.shortcut else x))

    def backward(self, dout):
        d = self.relu_out.backward(dout)
        dx = self.conv1.backward(self.bn1.backward(self.relu1.backward(
            self.conv2.backward(self.bn2.backward(d)))))
        return dx + (self.shortcut.backward(d) if self.shortcut else d)


class ResNetEmbed(Module):
    """Fbank batch ``(N, frames, bins)`` -> ``(logits, embedding)``.

    The spectrogram is treated as a one-channel image with frequency as height
    and time as width. With feat-level fusion the auxiliary vector is repeated
    at every frame, appended as extra frequency bins, and a per-frame linear
    projection maps the ``bins + aux_dim`` rows back to ``bins`` before the
    convolutional stem; the projection starts as ``[I; 0]`` so the auxiliary
    rows contribute nothing until trained. With emb-level fusion the auxiliary
    vector is concatenated to the pooled statistics.
    """

    def __init__(self, cfg: ResNetEmbedConfig, n_bins: int, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg, self.n_bins = cfg, n_bins
        rng = np.random.default_rng(seed)
        self.freq_proj = None
        if cfg.aux_fusion == "feat_level":
            self.freq_proj = Linear(n_bins + cfg.aux_dim, n_bins, rng, dtype)
            w = np.zeros((n_bins + cfg.aux_dim, n_bins), dtype)
            w[:n_bins] = np.eye(n_bins, dtype=dtype)
            self.freq_proj.weight.data = w
        c0 = cfg.stage_channels[0]
        m = cfg.bn_momentum
        self.stem = Sequential(Conv2d(1, c0, 3, 1, rng=rng, dtype=dtype), BatchNorm2d(c0, m, dtype=dtype), ReLU())
        blocks = []
        in_c = c0
        for s, (c, nb) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
            for b in range(nb):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(BasicBlock(in_c, c, stride, rng, dtype, m))
                in_c = c
        self.blocks = blocks
        self.pool = StatsPool()
        pooled = 2 * in_c + (cfg.aux_dim if cfg.aux_fusion == "emb_level" else 0)
        self.fc1 = Linear(pooled, cfg.embed_dim, rng, dtype)
        self.relu = ReLU()
        self.fc2 = Linear(cfg.embed_dim, cfg.n_classes, rng, dtype)

    @property
    def dtype(self):
        return self.fc1.weight.data.dtype

    def forward(self, feats, aux=None):
        x = np.asarray(feats, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.n_bins:
            raise ShapeError(f"expected (N, frames, {self.n_bins}) features, got {x.shape}")
        fusion = self.cfg.aux_fusion
        if (aux is None) != (fusion == "none"):
            raise ShapeError(f"aux input must be given iff aux_fusion != 'none' (aux_fusion={fusion!r})")
        if aux is not None:
            aux = np.asarray(aux, dtype=self.dtype)
            if aux.ndim == 1:
                aux = aux[None]
            if aux.shape != (x.shape[0], self.cfg.aux_dim):
                raise ShapeError(f"aux shape {aux.shape} != ({x.shape[0]}, {self.cfg.aux_dim})")
        if fusion == "feat_level":
            tiled = np.broadcast_to(aux[:, None, :], (x.shape[0], x.shape[1], aux.shape[1]))
            x = self.freq_proj(np.concatenate([x, tiled], axis=2))
        h = self.stem(x.transpose(0, 2, 1)[None])
        for block in self.blocks:
            h = block(h)
        pooled = self.pool(h)
        if fusion == "emb_level":
            pooled = np.concatenate([pooled, aux], axis=1)
        embedding = self.fc1(pooled)
        logits = self.fc2(self.relu(embedding))
        return logits, embedding

    def backward(self, dlogits, dembedding=None):
        d = self.relu.backward(self.fc2.backward(dlogits))
        if dembedding is not None:
            d = d + dembedding
        d = self.fc1.backward(d)
        d = d[:, :2 * self.cfg.stage_channels[-1]]
        d = self.pool.backward(d)
        for block in reversed(self.blocks):
            d = block.backward(d)
        d = self.stem.backward(d)[0].transpose(0, 2, 1)
        if self.freq_proj is not None:
            d = self.freq_proj.backward(d)[:, :, :self.n_bins]
        return d

    def descriptor(self) -> dict:
        return {"kind": "resnet_embed", "config": self.cfg.to_dict(), "n_bins": self.n_bins}

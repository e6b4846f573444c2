"""Bidirectional LSTM layers and the stacked sequence regressor."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, NumericFaultError, ShapeError
from .core import Module, Tensor, glorot_uniform, orthogonal
from .layers import Dropout, Linear, Tanh


@dataclass(frozen=True)
class BiLstmConfig:
    n_layers: int = 2
    hidden_per_direction: int = 256
    dropout: float = 0.6
    out_dim: int = 1

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.out_dim < 1 or self.hidden_per_direction < 1:
            raise ConfigError("out_dim and hidden_per_direction must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")

    def to_dict(self):
        return asdict(self)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class BiLSTM(Module):
    """One bidirectional LSTM layer over batch-first ``(N, T, D)`` input.

    Both directions are advanced together: direction 1 sees the sequence
    reversed, and weights are stacked along a leading axis of size 2. Gate
    order within the ``4H`` axis is input, forget, cell, output. All
    sequences in a batch share one length.
    """

    def __init__(self, input_dim, hidden, rng=None, dtype=np.float32, forget_bias=1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim, self.hidden = input_dim, hidden
        h4 = 4 * hidden
        self.w_x = Tensor(np.stack([glorot_uniform(rng, (input_dim, h4), input_dim, h4, dtype)
                                    for _ in range(2)]), name="w_x")
        self.w_h = Tensor(np.stack([np.concatenate([orthogonal(rng, hidden, dtype) for _ in range(4)], axis=1)
                                    for _ in range(2)]), name="w_h")
        b = np.zeros((2, h4), dtype)
        b[:, hidden:2 * hidden] = forget_bias
        self.b = Tensor(b, name="b")

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.input_dim:
            raise ShapeError(f"BiLSTM expects (N, T, {self.input_dim}), got {x.shape}")
        n, t_len, _ = x.shape
        hd = self.hidden
        xs = np.stack([x, x[:, ::-1]])                      # (2, N, T, D)
        z_in = xs @ self.w_x.data[:, None] + self.b.data[:, None, None, :]
        dtype = z_in.dtype
        gates = np.empty((2, n, t_len, 4 * hd), dtype)      # post-activation i, f, g, o
        cells = np.empty((2, n, t_len, hd), dtype)
        tanh_c = np.empty((2, n, t_len, hd), dtype)
        hs = np.empty((2, n, t_len, hd), dtype)
        h = np.zeros((2, n, hd), dtype)
        c = np.zeros((2, n, hd), dtype)
        w_h = self.w_h.data
        for t in range(t_len):
            z = z_in[:, :, t] + h @ w_h
            g = gates[:, :, t]
            g[..., :2 * hd] = _sigmoid(z[..., :2 * hd])
            g[..., 2 * hd:3 * hd] = np.tanh(z[..., 2 * hd:3 * hd])
            g[..., 3 * hd:] = _sigmoid(z[..., 3 * hd:])
            c = g[..., hd:2 * hd] * c + g[..., :hd] * g[..., 2 * hd:3 * hd]
            tc = np.tanh(c)
            h = g[..., 3 * hd:] * tc
            cells[:, :, t], tanh_c[:, :, t], hs[:, :, t] = c, tc, h
        bad = ~np.isfinite(hs)
        if bad.any():
            frame = int(np.argwhere(bad)[0][2])
            raise NumericFaultError(f"BiLSTM produced non-finite state at frame {frame}")
        self._cache = (xs, gates, cells, tanh_c, hs)
        return np.concatenate([hs[0], hs[1][:, ::-1]], axis=-1)

    def backward(self, dout):
        xs, gates, cells, tanh_c, hs = self._cache
        _, n, t_len, hd = hs.shape
        dh_seq = np.stack([dout[..., :hd], dout[..., hd:][:, ::-1]])
        dz_all = np.empty_like(gates)
        dh = np.zeros((2, n, hd), hs.dtype)
        dc = np.zeros((2, n, hd), hs.dtype)
        w_h_t = self.w_h.data.transpose(0, 2, 1)
        zeros = np.zeros((2, n, hd), hs.dtype)
        for t in range(t_len - 1, -1, -1):
            g = gates[:, :, t]
            i, f, gg, o = g[..., :hd], g[..., hd:2 * hd], g[..., 2 * hd:3 * hd], g[..., 3 * hd:]
            tc = tanh_c[:, :, t]
            c_prev = cells[:, :, t - 1] if t > 0 else zeros
            dh_t = dh_seq[:, :, t] + dh
            dc = dc + dh_t * o * (1 - tc * tc)
            dz = dz_all[:, :, t]
            dz[..., :hd] = dc * gg * i * (1 - i)
            dz[..., hd:2 * hd] = dc * c_prev * f * (1 - f)
            dz[..., 2 * hd:3 * hd] = dc * i * (1 - gg * gg)
            dz[..., 3 * hd:] = dh_t * tc * o * (1 - o)
            dc = dc * f
            dh = dz @ w_h_t
        h_prev = np.concatenate([np.zeros((2, n, 1, hd), hs.dtype), hs[:, :, :-1]], axis=2)
        flat_dz = dz_all.reshape(2, n * t_len, 4 * hd)
        self.w_h.accumulate(h_prev.reshape(2, n * t_len, hd).transpose(0, 2, 1) @ flat_dz)
        self.w_x.accumulate(xs.reshape(2, n * t_len, -1).transpose(0, 2, 1) @ flat_dz)
        self.b.accumulate(flat_dz.sum(axis=1))
        dxs = dz_all @ self.w_x.data.transpose(0, 2, 1)[:, None]
        return dxs[0] + dxs[1][:, ::-1]


class BiLstmRegressor(Module):
    """Stacked BiLSTM, dropout between layers, per-frame linear head and tanh."""

    def __init__(self, cfg: BiLstmConfig, input_dim: int, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg, self.input_dim = cfg, input_dim
        rng = np.random.default_rng(seed)
        hd = cfg.hidden_per_direction
        self.lstms = [BiLSTM(input_dim if i == 0 else 2 * hd, hd, rng, dtype) for i in range(cfg.n_layers)]
        drop_rng = np.random.default_rng([seed, 1])
        self.dropouts = [Dropout(cfg.dropout, drop_rng) for _ in range(cfg.n_layers - 1)]
        self.head = Linear(2 * hd, cfg.out_dim, rng, dtype)
        self.act = Tanh()

    def forward(self, x):
        h = x.astype(self.head.weight.data.dtype, copy=False)
        for i, lstm in enumerate(self.lstms):
            if i > 0:
                h = self.dropouts[i - 1](h)
            h = lstm(h)
        return self.act(self.head(h))

    def backward(self, dout):
        d = self.head.backward(self.act.backward(dout))
        for i in range(len(self.lstms) - 1, -1, -1):
            d = self.lstms[i].backward(d)
            if i > 0:
                d = self.dropouts[i - 1].backward(d)
        return d

    def descriptor(self) -> dict:
        return {"kind": "bilstm", "config": self.cfg.to_dict(), "input_dim": self.input_dim}

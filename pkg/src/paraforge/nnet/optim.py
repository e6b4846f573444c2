"""SGD with Nesterov momentum, Adam, and reduce-on-plateau scheduling."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, IntegrityError

LR_FLOOR = 1e-6
PLATEAU_THRESHOLD = 1e-4


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd_nesterov"
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    epochs: int = 100
    batch_size: int = 32

    def __post_init__(self):
        if self.kind not in ("sgd_nesterov", "adam"):
            raise ConfigError(f"optimizer kind must be 'sgd_nesterov' or 'adam', got {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.plateau_patience < 1:
            raise ConfigError("epochs, batch_size and plateau_patience must be >= 1")

    def to_dict(self):
        return asdict(self)


class Optimizer:
    def __init__(self, named_params, lr):
        self.named_params = list(named_params)
        self.lr = lr
        self.state: dict[str, np.ndarray] = {}
        self.t = 0

    def zero_grad(self):
        for _, p in self.named_params:
            p.zero_grad()

    def state_dict(self) -> dict:
        """Moment/velocity tensors by name; ``t`` and ``lr`` travel separately."""
        return {k: v.copy() for k, v in self.state.items()}

    def load_state_dict(self, state: dict, t: int = 0, lr: float | None = None):
        names = {n for n, _ in self.named_params}
        stray = [k for k in state if k.rsplit(".", 1)[0] not in names]
        if stray:
            raise IntegrityError(f"optimizer state for unknown parameters: {stray[:3]}")
        self.state = {k: np.array(v) for k, v in state.items()}
        self.t = t
        if lr is not None:
            self.lr = lr


class SGD(Optimizer):
    """``v <- mu v + g``; Nesterov: ``p <- p - lr (g + mu v)``, else ``p <- p - lr v``."""

    def __init__(self, named_params, lr, momentum=0.9, nesterov=True):
        super().__init__(named_params, lr)
        self.momentum, self.nesterov = momentum, nesterov

    def step(self):
        self.t += 1
        mu = self.momentum
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            if mu:
                v = self.state.get(f"{name}.velocity")
                v = g.copy() if v is None else mu * v + g
                self.state[f"{name}.velocity"] = v
                g = g + mu * v if self.nesterov else v
            p.data = (p.data - self.lr * g).astype(p.data.dtype)


class Adam(Optimizer):
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(named_params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1 ** self.t
        corr2 = 1 - b2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.state.get(f"{name}.m", np.zeros_like(p.data))
            v = self.state.get(f"{name}.v", np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.state[f"{name}.m"], self.state[f"{name}.v"] = m, v
            update = self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


def make_optimizer(named_params, cfg: OptimizerConfig) -> Optimizer:
    if cfg.kind == "adam":
        return Adam(named_params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
    return SGD(named_params, cfg.lr, cfg.momentum, nesterov=True)


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without a new minimum.

    An epoch counts as an improvement when its loss is below
    ``best * (1 - 1e-4)``. After a reduction the patience counter restarts;
    the learning rate never drops below ``1e-6``.
    """

    def __init__(self, lr, patience=5, factor=0.1, threshold=PLATEAU_THRESHOLD, floor=LR_FLOOR):
        self.lr, self.patience, self.factor = lr, patience, factor
        self.threshold, self.floor = threshold, floor
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        bar = self.best * (1 - self.threshold) if self.best > 0 else self.best - self.threshold
        if loss < bar:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.bad_epochs = 0
        return self.lr


def plateau_scheduler(history, cfg: OptimizerConfig) -> float:
    """Learning rate in force after replaying the per-epoch training losses in ``history``."""
    if len(history) == 0:
        raise ConfigError("plateau_scheduler needs a non-empty loss history")
    sched = PlateauScheduler(cfg.lr, cfg.plateau_patience, cfg.plateau_factor)
    for loss in history:
        sched.step(float(loss))
    return sched.lr

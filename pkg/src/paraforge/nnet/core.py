"""Tensors, the module base class and weight initializers."""

from __future__ import annotations

import numpy as np

from ..errors import IntegrityError, NumericFaultError, ShapeError


class Tensor:
    """A parameter or buffer array with an accumulating gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = True, name: str = ""):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match {self.name} {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def check_finite(arr, where: str):
    if not np.all(np.isfinite(arr)):
        raise NumericFaultError(f"non-finite values produced by {where}")


class Module:
    """Base class: owns tensors and child modules, exposes forward/backward.

    Subclasses implement ``forward`` and ``backward``; ``backward`` receives the
    gradient of the loss w.r.t. the last ``forward`` output, accumulates
    parameter gradients and returns the gradient w.r.t. the input.
    """

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        for o in out if isinstance(out, tuple) else (out,):
            check_finite(o, type(self).__name__)
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def children(self):
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def _tensors(self, prefix=""):
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + key, value
        for key, child in self.children():
            yield from child._tensors(f"{prefix}{key}.")

    def named_parameters(self):
        return [(n, t) for n, t in self._tensors() if t.requires_grad]

    def named_buffers(self):
        return [(n, t) for n, t in self._tensors() if not t.requires_grad]

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for _, t in self._tensors():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self._tensors()}

    def load_state_dict(self, state: dict):
        own = dict(self._tensors())
        missing = sorted(set(own) - set(state))
        if missing:
            raise IntegrityError(f"checkpoint is missing tensors: {', '.join(missing[:5])}")
        unexpected = sorted(set(state) - set(own))
        if unexpected:
            raise IntegrityError(f"checkpoint has unexpected tensors: {', '.join(unexpected[:5])}")
        for name, t in own.items():
            value = np.asarray(state[name])
            if value.shape != t.data.shape:
                raise IntegrityError(f"{name}: shape {value.shape} != expected {t.data.shape}")
            t.data = value.astype(t.data.dtype, copy=True)
        return self


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def orthogonal(rng: np.random.Generator, n: int, dtype):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return (q * np.sign(np.diag(r))).astype(dtype)

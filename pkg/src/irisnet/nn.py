"""Layer modules, parameter bookkeeping and the momentum SGD optimizer."""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import DTYPE, Tensor


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal(shape, dtype=np.float32) * DTYPE(std), requires_grad=True)


class Module:
    """Base class: parameters are requires-grad Tensor attributes, in
    definition order; child modules (and lists of them) are walked recursively."""

    training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)):
                for i, m in enumerate(v):
                    if isinstance(m, Module):
                        yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: stored shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=DTYPE)
        for name, child in self._buffer_owners():
            if name in state:
                child.set_buffer(name.rsplit(".", 1)[-1], state[name])

    def _buffer_owners(self, prefix: str = ""):
        for name, child in self.children():
            for bname in getattr(child, "buffer_names", ()):
                yield f"{prefix}{name}.{bname}", child
            yield from child._buffer_owners(f"{prefix}{name}.")


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0,
                 rng: Optional[np.random.Generator] = None, bias: bool = True):
        rng = rng or np.random.default_rng(0)
        self.stride, self.pad, self.k = stride, pad, k
        self.weight = he_normal(rng, (cout, cin, k, k), cin * k * k)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)

    def __repr__(self):
        o, c, k, _ = self.weight.shape
        return f"Conv2d({c}, {o}, k={k}, stride={self.stride}, pad={self.pad})"


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.weight = he_normal(rng, (fout, fin), fin)
        self.bias = Tensor(np.zeros(fout), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2:
            x = ops.flatten(x)
        return ops.linear(x, self.weight, self.bias)

    def __repr__(self):
        return f"Linear({self.weight.shape[1]}, {self.weight.shape[0]})"


class BatchNorm2d(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = ops.BatchNormState()
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.state, self.training,
                               self.momentum, self.eps)

    def named_buffers(self, prefix: str = ""):
        if self.state.initialized:
            yield prefix + "running_mean", self.state.running_mean
            yield prefix + "running_var", self.state.running_var

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self.state, name, np.array(value, dtype=DTYPE))


class ReLU(Module):
    def forward(self, x):
        return ops.relu(x)


class LeakyReLU(Module):
    def __init__(self, slope: float = 0.1):
        self.slope = slope

    def forward(self, x):
        return ops.leaky_relu(x, self.slope)


class MaxPool2d(Module):
    """Max pooling that discards indices (use :func:`ops.maxpool2d` to keep them)."""

    def __init__(self, k: int = 2, stride: Optional[int] = None, ceil_mode: bool = False):
        self.k, self.stride, self.ceil_mode = k, stride or k, ceil_mode

    def forward(self, x):
        return ops.maxpool2d(x, self.k, self.stride, self.ceil_mode)[0]


class AvgPool2d(Module):
    def __init__(self, k: int, stride: Optional[int] = None):
        self.k, self.stride = k, stride or k

    def forward(self, x):
        return ops.avgpool2d(x, self.k, self.stride)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        self.p, self.rng = p, rng

    def forward(self, x):
        return ops.dropout(x, self.p, self.training, self.rng)


class Flatten(Module):
    def forward(self, x):
        return ops.flatten(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    The velocity carries the learning rate (``v = m*v + lr*(g + wd*p)``), so a
    learning-rate drop takes effect smoothly.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 clip_norm: Optional[float] = None, lr_scales: Optional[list] = None):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.clip_norm = clip_norm
        self.lr_scales = list(lr_scales) if lr_scales is not None else [1.0] * len(self.params)
        if len(self.lr_scales) != len(self.params):
            raise ValueError("one lr scale per parameter")
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            norm = math.sqrt(sum(float(np.vdot(p.grad, p.grad))
                                 for p in self.params if p.grad is not None))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for p, v, ls in zip(self.params, self.velocity, self.lr_scales):
            if p.grad is None:
                continue
            g = p.grad * DTYPE(scale)
            if self.weight_decay:
                g = g + DTYPE(self.weight_decay) * p.data
            v *= DTYPE(self.momentum)
            v += DTYPE(self.lr * ls) * g
            p.data -= v


class PlateauSchedule:
    """Divide the learning rate by 10 when a monitored loss stalls.

    A drop happens after ``patience`` consecutive epochs without an improvement
    of at least ``min_delta``; after ``max_drops`` drops :attr:`stop` turns true
    once the metric stalls again.
    """

    def __init__(self, optimizer: SGD, patience: int = 5, min_delta: float = 1e-4,
                 max_drops: int = 3, factor: float = 0.1):
        self.opt, self.patience, self.min_delta = optimizer, patience, min_delta
        self.max_drops, self.factor = max_drops, factor
        self.best = math.inf
        self.bad_epochs = 0
        self.drops = 0
        self.stop = False

    def update(self, value: float) -> None:
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            if self.drops >= self.max_drops:
                self.stop = True
            else:
                self.opt.lr *= self.factor
                self.drops += 1

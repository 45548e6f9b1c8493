"""Parameters, modules and the layers used by the forecast networks."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .core import Tensor, get_default_dtype, relu


class Parameter(Tensor):
    """A trainable leaf tensor.

    ``l2`` marks the tensor for weight decay; ``l1_adjacent_weight`` is the
    strength of the adjacent-filter penalty and is only meaningful for
    locally connected weights. ``lr_scale`` multiplies the optimiser step.
    """

    def __init__(self, data, name: str = "", l2: bool = True, l1_adjacent_weight: float = 0.0,
                 lr_scale: float = 1.0):
        super().__init__(np.array(data, dtype=get_default_dtype()), requires_grad=True)
        if l1_adjacent_weight < 0:
            raise ValueError("l1_adjacent_weight must be >= 0")
        self.name = name
        self.l2 = l2
        self.l1_adjacent_weight = float(l1_adjacent_weight)
        self.lr_scale = float(lr_scale)
        self.lcn = False  # set on locally connected weights


def truncated_normal(shape, std: float, rng: np.random.Generator) -> np.ndarray:
    """Draw N(0, std^2) samples, redrawing any outside +-2 std."""
    if std <= 0:
        raise ValueError("std must be > 0")
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Module:
    """Minimal container: parameters, buffers and child modules are found
    by attribute, in assignment order."""

    def __init__(self):
        self.training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in getattr(self, "_buffers", ()):
            yield f"{prefix}{key}", getattr(self, key)
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update((n, b) for n, b in self.named_buffers())
        return state

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
        for name, b in buffers.items():
            b[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, dilation: int = 1, *,
                 rng: np.random.Generator, std: float = 0.05, wrap_lon: bool = False,
                 bias: bool = True):
        super().__init__()
        self.dilation = dilation
        self.wrap_lon = wrap_lon
        self.weight = Parameter(truncated_normal((cout, cin, kernel, kernel), std, rng), "weight")
        self.bias = Parameter(np.zeros(cout), "bias", l2=False) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, dilation=self.dilation, padding="same",
                        wrap_lon=self.wrap_lon)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels), "gamma", l2=False)
        self.beta = Parameter(np.zeros(channels), "beta", l2=False)
        dtype = get_default_dtype()
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 3, dilation: int = 1, *,
                 rng: np.random.Generator, std: float = 0.05, wrap_lon: bool = False):
        super().__init__()
        # bias is redundant in front of batch norm
        self.conv = Conv2d(cin, cout, kernel, dilation, rng=rng, std=std, wrap_lon=wrap_lon, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))


class LocallyConnected(Module):
    """1x1 locally connected layer with optional adjacent-filter l1 penalty."""

    def __init__(self, height: int, width: int, cin: int, cout: int, *,
                 rng: np.random.Generator | None = None, std: float = 0.05, zero_init: bool = False,
                 l1_adjacent_weight: float = 0.0):
        super().__init__()
        shape = (height, width, cout, cin)
        values = np.zeros(shape) if zero_init else truncated_normal(shape, std, rng)
        self.weight = Parameter(values, "weight", l1_adjacent_weight=l1_adjacent_weight)
        self.weight.lcn = True
        self.bias = Parameter(np.zeros((height, width, cout)), "bias", l2=False)

    def forward(self, x):
        return F.locally_connected(x, self.weight, self.bias)

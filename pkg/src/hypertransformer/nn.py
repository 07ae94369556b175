"""Parameter containers and the handful of layers the network needs."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        # optimizers update flat views in place, so storage must be contiguous
        super().__init__(np.ascontiguousarray(data, dtype=dtype), requires_grad=True)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class tracking parameters, buffers and sub-modules by attribute order."""

    training = True

    def _named_members(self, prefix: str = ""):
        """Yield ``(name, kind, value)`` for parameters and buffers, depth first."""
        buffers = getattr(self, "_buffer_names", ())
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, "param", value
            elif name in buffers:
                yield full, "buffer", value
            else:
                yield from _walk(value, full)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, kind, value in self._named_members(prefix):
            if kind == "param":
                yield name, value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, kind, value in self._named_members(prefix):
            if kind == "buffer":
                yield name, value

    def _children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            yield from _modules_in(value)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        missing = [k for k in own if k not in state]
        extra = [k for k in state if k not in own]
        if missing or extra:
            raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ContractError(f"{name}: expected shape {arr.shape}, got {src.shape}")
            arr[...] = src

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for module in self._all_modules():
            for name in getattr(module, "_buffer_names", ()):
                setattr(module, name, getattr(module, name).astype(dtype))
        return self

    def _all_modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children():
            yield from child._all_modules()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, prefix: str):
    if isinstance(value, Module):
        yield from value._named_members(prefix + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{prefix}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{prefix}.{key}")


def _modules_in(value):
    if isinstance(value, Module):
        yield value
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _modules_in(item)
    elif isinstance(value, dict):
        for item in value.values():
            yield from _modules_in(item)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=None, *, rng, dtype=np.float64):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel=2, stride=2, padding=0, *, rng, dtype=np.float64):
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(kaiming_uniform(rng, (c_in, c_out, kernel, kernel), c_in, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, d_in, d_out, *, rng, dtype=np.float64):
        self.weight = Parameter(kaiming_uniform(rng, (d_out, d_in), d_in, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float64):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )

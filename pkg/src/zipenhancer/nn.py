"""Parameter containers and basic layers on top of :mod:`zipenhancer.tensors`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensors as T
from .tensors import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=T.get_default_dtype())
        super().__init__(arr, requires_grad=True, name=name)


class Module:
    """Attribute-registered parameters and submodules, traversed in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield from m.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for m in value:
                    yield from m.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Weight stored ``[in, out]``; PyTorch-style uniform init."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 init_scale: float = 1.0):
        bound = init_scale / np.sqrt(n_in)
        self.weight = Parameter(_uniform(rng, (n_in, n_out), bound))
        self.bias = Parameter(_uniform(rng, (n_out,), bound)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel, rng: np.random.Generator,
                 stride=1, dilation=1, padding=0, bias: bool = True):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        bound = 1.0 / np.sqrt(c_in * kh * kw)
        self.weight = Parameter(_uniform(rng, (c_out, c_in, kh, kw), bound))
        self.bias = Parameter(_uniform(rng, (c_out,), bound)) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.padding = padding

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.dilation, self.padding)


class InstanceNorm2d(Module):
    """Per-sample, per-channel normalization over the two trailing axes, with affine."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return T.instance_norm(x, self.weight, self.bias, self.eps)


class PReLU(Module):
    def __init__(self, channels: int, axis: int = -1, init: float = 0.25):
        self.weight = Parameter(np.full(channels, init))
        self.axis = axis

    def forward(self, x):
        return T.prelu(x, self.weight, self.axis)

"""Parameterised layers built on the tensor primitives."""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .core import Tensor, get_default_dtype


class Module:
    """Container that discovers parameters, buffers and submodules by attribute order."""

    training: bool = True

    def __setattr__(self, name, value):
        d = self.__dict__
        if "_order" not in d:
            object.__setattr__(self, "_order", [])
        if isinstance(value, (Tensor, Module)) or (isinstance(value, np.ndarray) and name.startswith("running_")):
            if name not in d["_order"]:
                d["_order"].append(name)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name in self.__dict__.get("_order", []):
            value = getattr(self, name)
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self.__dict__.get("_order", []):
            value = getattr(self, name)
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for name in self.__dict__.get("_order", []):
            value = getattr(self, name)
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict()
        for name, p in self.named_parameters():
            state[name] = p.data
        for name, b in self.named_buffers():
            state[name] = b
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)}")
        for name, p in self.named_parameters():
            src = state[name]
            if src.shape != p.shape:
                raise ValueError(f"{name}: shape {src.shape} does not match {p.shape}")
            p.data = np.array(src, dtype=p.dtype, copy=True)
        for name, b in self.named_buffers():
            b[...] = state[name]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr.astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = False, dtype=None):
        dtype = dtype or get_default_dtype()
        fan_in = in_ch * kernel * kernel
        # He-normal for relu stacks
        self.weight = _param(rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, in_ch, kernel, kernel)), dtype)
        self.bias = _param(np.zeros(out_ch), dtype) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor, weight: Optional[Tensor] = None) -> Tensor:
        w = self.weight if weight is None else weight
        return ops.conv2d(x, w, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_f: int, out_f: int, rng: np.random.Generator, bias: bool = True, dtype=None):
        dtype = dtype or get_default_dtype()
        bound = 1.0 / np.sqrt(in_f)
        self.weight = _param(rng.uniform(-bound, bound, (in_f, out_f)), dtype)
        self.bias = _param(rng.uniform(-bound, bound, out_f), dtype) if bias else None

    def forward(self, x: Tensor, weight: Optional[Tensor] = None) -> Tensor:
        w = self.weight if weight is None else weight
        y = ops.matmul(x, w)
        return y if self.bias is None else ops.add(y, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None):
        dtype = dtype or get_default_dtype()
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=self.training, momentum=self.momentum, eps=self.eps)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5, dtype=None):
        dtype = dtype or get_default_dtype()
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)
        self.groups = groups
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.gamma, self.beta, self.groups, self.eps)

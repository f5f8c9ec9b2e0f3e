"""Module containers, layers and the AdamW optimizer on top of the autodiff engine."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F


def Parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Parameter container; submodules and parameters are discovered by attribute."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, (Module, Tensor)):
                        yield f"{name}.{key}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif value.requires_grad:
                yield full, value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Non-trainable tensors (e.g. EMA codebooks) that still belong in checkpoints."""
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif not value.requires_grad:
                yield full, value

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update((name, b.data) for name, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        own.update(self.named_buffers())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, tensor in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {value.shape} vs model {tensor.shape}")
            tensor.data = value.astype(tensor.dtype, copy=True)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for _, b in self.named_buffers():
            b.data = b.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, pad: int | None = None,
                 rng: np.random.Generator | None = None, zero_init: bool = False, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * kernel**3
        bound = 1.0 / math.sqrt(fan_in)
        shape = (c_out, c_in, kernel, kernel, kernel)
        if zero_init:
            self.weight = Parameter(np.zeros(shape, dtype=dtype))
            self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        else:
            self.weight = Parameter(_uniform(rng, shape, bound * math.sqrt(3.0), dtype))
            self.bias = Parameter(_uniform(rng, (c_out,), bound, dtype))
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, self.stride, self.pad)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(_uniform(rng, (d_out, d_in), bound * math.sqrt(3.0), dtype))
        self.bias = Parameter(_uniform(rng, (d_out,), bound, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


def norm_groups(channels: int, preferred: int = 8) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, affine: bool = True, dtype=np.float32):
        self.groups = norm_groups(channels, groups)
        self.weight = Parameter(np.ones(channels, dtype=dtype)) if affine else None
        self.bias = Parameter(np.zeros(channels, dtype=dtype)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.weight, self.bias)


class InstanceNorm(GroupNorm):
    def __init__(self, channels: int, affine: bool = True, dtype=np.float32):
        super().__init__(channels, channels, affine, dtype)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, grad_clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        scale = 1.0
        if self.grad_clip is not None:
            total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in self.params if p.grad is not None))
            if total > self.grad_clip:
                scale = self.grad_clip / (total + 1e-12)
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

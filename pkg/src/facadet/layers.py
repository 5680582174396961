"""Parameter containers and the plain convolutional blocks of the baseline."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor, concat_channels, silu, split_channels


class Parameter(Tensor):
    """A trainable leaf tensor. ``decay`` marks it for weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = False):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.decay = decay


class Module:
    """Minimal module tree: parameters are discovered from attributes."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (float64 copies are used for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, path: str) -> Iterator[tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int = 1, stride: int = 1, padding: Optional[int] = None,
                 groups: int = 1, bias: bool = True, rng: Optional[np.random.Generator] = None,
                 gain: float = 1.0):
        rng = rng or np.random.default_rng(0)
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.groups = groups
        fan_in = (c_in // groups) * k * k
        self.weight = Parameter(_uniform(rng, (c_out, c_in // groups, k, k), fan_in, gain), decay=True)
        self.bias = Parameter(np.zeros(c_out, np.float32)) if bias else None

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvAct(Module):
    """Convolution + bias + SiLU, the basic unit of backbone and neck."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, stride: int = 1,
                 rng: Optional[np.random.Generator] = None):
        # gain ~ sqrt(2) keeps activation scale roughly constant through SiLU stacks
        self.conv = Conv2d(c_in, c_out, k, stride, rng=rng, gain=1.6)

    def forward(self, x: Tensor) -> Tensor:
        return silu(self.conv(x))


class DepthwiseConv(Module):
    def __init__(self, channels: int, k: int, bias: bool = True, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(_uniform(rng, (channels, 1, k, k), k * k), decay=True)
        self.bias = Parameter(np.zeros(channels, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.depthwise_conv2d(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int):
        self.groups = groups
        self.gamma = Parameter(np.ones(channels, np.float32))
        self.beta = Parameter(np.zeros(channels, np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.gamma, self.beta)


class Bottleneck(Module):
    def __init__(self, c: int, shortcut: bool = True, rng: Optional[np.random.Generator] = None):
        self.cv1 = ConvAct(c, c, 3, rng=rng)
        self.cv2 = ConvAct(c, c, 3, rng=rng)
        self.shortcut = shortcut

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv2(self.cv1(x))
        return x + y if self.shortcut else y


class C2f(Module):
    """Split-transform-concat block: 1x1 -> split -> bottleneck chain -> concat -> 1x1."""

    def __init__(self, c_in: int, c_out: int, n: int = 1, shortcut: bool = False,
                 rng: Optional[np.random.Generator] = None):
        self.c = c_out // 2
        self.cv1 = ConvAct(c_in, 2 * self.c, 1, rng=rng)
        self.m = [Bottleneck(self.c, shortcut, rng=rng) for _ in range(n)]
        self.cv2 = ConvAct((2 + n) * self.c, c_out, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        ys = split_channels(self.cv1(x), [self.c, self.c])
        for block in self.m:
            ys.append(block(ys[-1]))
        return self.cv2(concat_channels(ys))

    def receptive_layers(self) -> list[tuple[int, int]]:
        """(kernel, stride) of the longest conv path, for receptive-field bookkeeping."""
        return [(3, 1), (3, 1)] * len(self.m)

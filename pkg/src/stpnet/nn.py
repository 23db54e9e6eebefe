"""Parameter containers and the small set of layers the network needs."""
from __future__ import annotations

import zlib
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgumentError


class Parameter(Tensor):
    """A trainable tensor plus the rule used to (re)initialize it."""

    __slots__ = ("init",)

    def __init__(self, shape, init: Tuple = ("zeros",), dtype=np.float32):
        super().__init__(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.init = init

    def reset(self, rng: np.random.Generator) -> None:
        kind = self.init[0]
        if kind == "zeros":
            self.data[...] = 0
        elif kind == "ones":
            self.data[...] = 1
        elif kind == "he_uniform":
            bound = np.sqrt(6.0 / self.init[1])
            self.data[...] = rng.uniform(-bound, bound, size=self.shape)
        elif kind == "normal":
            self.data[...] = rng.normal(0.0, self.init[1], size=self.shape)
        else:
            raise InvalidArgumentError(f"unknown init {kind!r}")


class Module:
    """Tree of parameters, buffers and child modules.

    Attribute insertion order defines the parameter order, which in turn
    defines the checkpoint layout.
    """

    def __init__(self):
        object.__setattr__(self, "_buffers", OrderedDict())
        self.training = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def __getattr__(self, name):
        buffers = self.__dict__.get("_buffers")
        if buffers is not None and name in buffers:
            return buffers[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self.__dict__.items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise InvalidArgumentError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise InvalidArgumentError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def reset_parameters(self, seed: int) -> None:
        """Initialize every parameter from a stream keyed by (seed, name).

        Keying by name keeps the initial value of a parameter independent of
        which other modules exist, so ablated models share their common
        weights with the full model.
        """
        for name, p in self.named_parameters():
            p.reset(np.random.default_rng([seed, zlib.crc32(name.encode())]))
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.running_mean[...] = 0
                m.running_var[...] = 1

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def astype(self, dtype) -> "Module":
        for m in self.modules():
            for name, value in list(m.__dict__.items()):
                if isinstance(value, Parameter):
                    value.data = value.data.astype(dtype)
                    value.grad = None
            for name in list(m._buffers):
                m._buffers[name] = m._buffers[name].astype(dtype)
        return self

    @property
    def dtype(self):
        for _, p in self.named_parameters():
            return p.dtype
        return np.dtype(np.float32)

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._n = 0
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(self._n), m)
        self._n += 1

    def __getitem__(self, i: int) -> Module:
        if i < 0:
            i += self._n
        return getattr(self, str(i))

    def __len__(self) -> int:
        return self._n

    def __iter__(self):
        return (self[i] for i in range(self._n))


class Conv2d(Module):
    def __init__(
        self,
        cin: int,
        cout: int,
        k: int,
        padding: int = 0,
        dilation: int = 1,
        groups: int = 1,
        bias: bool = True,
        zero_init: bool = False,
    ):
        super().__init__()
        if cin % groups or cout % groups:
            raise InvalidArgumentError("conv channels not divisible by groups")
        fan_in = cin // groups * k * k
        init = ("zeros",) if zero_init else ("he_uniform", fan_in)
        self.weight = Parameter((cout, cin // groups, k, k), init)
        self.bias = Parameter((cout,)) if bias else None
        self.padding, self.dilation, self.groups = padding, dilation, groups

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(
            x, self.weight, self.bias, padding=self.padding, dilation=self.dilation, groups=self.groups
        )


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter((channels,), ("ones",))
        self.beta = Parameter((channels,))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))
        self.momentum, self.eps = momentum, eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Linear(Module):
    def __init__(self, cin: int, cout: int, bias: bool = True):
        super().__init__()
        self.weight = Parameter((cout, cin), ("he_uniform", cin))
        self.bias = Parameter((cout,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter((dim,), ("ones",))
        self.beta = Parameter((dim,))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class ConvBNReLU(Module):
    """3x3 conv (padding 1) -> batch norm -> ReLU.

    The conv has no bias: batch norm would subtract it again.
    """

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x)).relu()

"""Parameter containers and the layers the localization networks are built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .errors import ShapeError
from .tensor import Tensor


class Parameter(Tensor):
    """Leaf tensor that always requires gradients."""

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Base class; parameters and sub-modules are discovered from attributes.

    Attribute order is registration order, so ``named_parameters`` is stable
    across runs and its names double as checkpoint keys.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                continue
            seen.add(id(p))
            p.name = name
            yield name, p

    def _walk(self, prefix: str):
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value._walk(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, pad: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.pad = pad
        self.weight = Parameter(he_uniform(rng, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(he_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def zero_init(self, bias=None) -> "Dense":
        """Zero the weights and set the bias, so the layer outputs a constant."""
        self.weight.data = np.zeros_like(self.weight.data)
        b = np.zeros_like(self.bias.data) if bias is None else np.asarray(bias, dtype=self.bias.dtype)
        self.bias.data = b.copy()
        return self

    def forward(self, x: Tensor) -> Tensor:
        return F.dense(x, self.weight, self.bias)


class ResidualBlock(Module):
    """Two 3x3 convolutions with ReLU and an identity or 1x1 projection shortcut.

    No normalization layers: output = relu(conv2(relu(conv1(x))) + shortcut(x)).
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, pad=1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, stride=1, pad=1, rng=rng, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(in_ch, out_ch, 1, stride=stride, pad=0, rng=rng, dtype=dtype)
        else:
            self.shortcut = None

    def forward(self, x: Tensor) -> Tensor:
        return residual_block(x, self)


def residual_block(x: Tensor, block: ResidualBlock) -> Tensor:
    if x.shape[1] != block.conv1.in_channels:
        raise ShapeError(f"residual block expects {block.conv1.in_channels} channels, got {x.shape[1]}")
    branch = block.conv2(F.relu(block.conv1(x)))
    short = x if block.shortcut is None else block.shortcut(x)
    if branch.shape != short.shape:
        raise ShapeError(f"residual branch {branch.shape} and shortcut {short.shape} disagree")
    return F.relu(branch + short)

"""Parameter containers and the small set of layers the model needs."""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from ..exceptions import ConfigError
from . import functional as F
from .core import Parameter, Tensor, get_default_dtype


class Module:
    """Base class tracking parameters, buffers and child modules by attribute order.

    Buffers are plain ndarrays declared through :meth:`register_buffer`;
    they are saved in checkpoints but never receive gradients.
    """

    def __init__(self):
        object.__setattr__(self, "_buffer_names", [])
        object.__setattr__(self, "training", True)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, value)
        if name not in self._buffer_names:
            self._buffer_names.append(name)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -------------------------------------------------------------- traversal
    def children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list:
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((name, p.data) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        owners = {}
        self._collect_buffer_owners("", owners)
        missing = [name for name in list(params) + list(owners) if name not in state]
        if missing:
            raise ConfigError(f"checkpoint lacks entries: {missing[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ConfigError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
        for name, (owner, attr) in owners.items():
            current = getattr(owner, attr)
            value = np.asarray(state[name])
            if value.shape != current.shape:
                raise ConfigError(f"shape mismatch for {name}: {value.shape} vs {current.shape}")
            setattr(owner, attr, value.astype(current.dtype, copy=True))

    def _collect_buffer_owners(self, prefix: str, out: dict) -> None:
        for name in self._buffer_names:
            out[prefix + name] = (self, name)
        for name, child in self.children():
            child._collect_buffer_owners(prefix + name + ".", out)

    # ------------------------------------------------------------------ modes
    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def astype(self, dtype) -> "Module":
        """Cast every parameter and floating buffer in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        owners = {}
        self._collect_buffer_owners("", owners)
        for owner, attr in owners.values():
            value = getattr(owner, attr)
            if value.dtype.kind == "f":
                setattr(owner, attr, value.astype(dtype))
        return self


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._count = 0
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(self._count), module)
        self._count += 1

    def __getitem__(self, i: int) -> Module:
        if i < 0:
            i += self._count
        return getattr(self, str(i))

    def __len__(self) -> int:
        return self._count

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._count))


class ModuleDict(Module):
    def __init__(self, modules: Optional[dict] = None):
        super().__init__()
        for key, m in (modules or {}).items():
            setattr(self, key, m)

    def __getitem__(self, key: str) -> Module:
        return getattr(self, key)

    def __contains__(self, key: str) -> bool:
        return isinstance(vars(self).get(key), Module)

    def keys(self):
        return [name for name, _ in self.children()]

    def items(self):
        return list(self.children())


def kaiming_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(get_default_dtype())


class Linear(Module):
    """Affine map with weight stored as (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        dtype = get_default_dtype()
        self.weight = Parameter((rng.standard_normal((in_features, out_features)) * std).astype(dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        pad: Optional[int] = None,
        bias: bool = True,
    ):
        super().__init__()
        self.stride = stride
        self.pad = kernel_size // 2 if pad is None else pad
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(kaiming_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_default_dtype())) if bias else None

    def forward(self, x) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        dtype = get_default_dtype()
        self.momentum = momentum
        self.eps = eps
        # False freezes the running buffers while still using batch statistics.
        self.track_stats = True
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x) -> Tensor:
        return F.batch_norm(
            x,
            self.weight,
            self.bias,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
            update_stats=self.track_stats,
        )


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        dtype = get_default_dtype()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class ConvBNReLU(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel_size: int = 3, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, rng, stride=stride, bias=False)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x) -> Tensor:
        return self.bn(self.conv(x)).relu()

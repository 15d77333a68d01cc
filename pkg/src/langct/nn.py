"""Parameter containers and seeded layers over the tensor core.

Modules register every Tensor attribute they (or nested containers) hold.
Parameter iteration order follows attribute insertion order, so models built
deterministically enumerate deterministically.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from langct.tensor import Tensor, conv2d, layer_norm, matmul

__all__ = ["Module", "Linear", "Conv2d", "LayerNorm", "Sequential"]


class Module:
    """Base class: tensor discovery, state dicts, freezing."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """All tensors reachable from attributes, trainable or not."""
        yield from _collect(vars(self), prefix.rstrip("."))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Strict load: every entry must match an existing tensor's shape."""
        own = dict(self.named_tensors())
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise ValueError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
            )
        for name, arr in state.items():
            t = own[name]
            if tuple(arr.shape) != t.data.shape:
                raise ValueError(
                    f"shape mismatch for '{name}': {arr.shape} vs {t.data.shape}"
                )
            t.data = np.asarray(arr, dtype=np.float32).copy()

    def freeze(self) -> "Module":
        for _, t in self.named_tensors():
            t.requires_grad = False
        return self

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())


def _collect(obj, prefix: str):
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, Module):
        yield from _collect(vars(obj), prefix)
    elif isinstance(obj, dict):
        for k, v in obj.items():
            if isinstance(k, str) and k.startswith("_"):
                continue
            sub = f"{prefix}.{k}" if prefix else str(k)
            yield from _collect(v, sub)
    elif isinstance(obj, (list, tuple)):
        # NamedTuples expose field names; plain sequences get indices
        fields = getattr(obj, "_fields", None)
        for i, v in enumerate(obj):
            k = fields[i] if fields else str(i)
            sub = f"{prefix}.{k}" if prefix else k
            yield from _collect(v, sub)


class Linear(Module):
    """Affine map over the trailing dimension."""

    def __init__(self, rng: np.random.Generator, in_features: int, out_features: int,
                 bias: bool = True):
        std = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.normal(0.0, std, (in_features, out_features)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class Conv2d(Module):
    """Seeded NCHW convolution; ``zero_init`` makes the layer an exact zero map."""

    def __init__(self, rng: np.random.Generator, in_channels: int, out_channels: int,
                 kernel_size: int, stride: int = 1, padding: int = 0,
                 depthwise: bool = False, bias: bool = True, zero_init: bool = False):
        k = kernel_size
        if depthwise:
            if out_channels != in_channels:
                raise ValueError("depthwise conv keeps the channel count")
            shape = (in_channels, k, k)
            fan_in = k * k
        else:
            shape = (out_channels, in_channels, k, k)
            fan_in = in_channels * k * k
        w = np.zeros(shape) if zero_init else rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        self.depthwise = depthwise

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding, depthwise=self.depthwise)


class LayerNorm(Module):
    """Affine layer norm over the channel axis.

    ``channels_first`` normalizes axis 1 of (B, C, H, W); ``channels_last``
    normalizes the trailing axis.
    """

    def __init__(self, num_features: int, data_format: str = "channels_last",
                 eps: float = 1e-5):
        if data_format not in ("channels_first", "channels_last"):
            raise ValueError(f"unknown data_format '{data_format}'")
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.data_format = data_format
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        if self.data_format == "channels_last":
            xn = layer_norm(x, axes=-1, eps=self.eps)
            return xn * self.gamma + self.beta
        xn = layer_norm(x, axes=1, eps=self.eps)
        extra = (1,) * (x.ndim - 2)
        return xn * self.gamma.reshape(-1, *extra) + self.beta.reshape(-1, *extra)


class Sequential(Module):
    def __init__(self, *modules: Module):
        self.layers = list(modules)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

"""Parameter containers and the stateless layer base class.

Layers hold only parameters. ``forward`` returns ``(output, cache)`` and
``backward(cache, grad)`` returns the input gradient while accumulating
parameter gradients into each :class:`~datpp.tensor.Param`. Nothing is
stored on the layer between the two calls, so one layer can serve several
concurrent forward passes.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import StateError
from .tensor import Param


class Module:
    def named_params(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, val in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(val, Param):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_params(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{prefix}{name}.{i}.")

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.value) for k, p in self.named_params())

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


def require_cache(cache, what: str):
    if cache is None:
        raise StateError(f"{what}: backward called without a forward cache")
    return cache


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Param(T.trunc_normal(rng, (cin, cout)))
        self.bias = Param(np.zeros(cout)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight.value, None if self.bias is None else self.bias.value), x

    def backward(self, cache, g):
        x = require_cache(cache, "Linear")
        gx, gw, gb = T.linear_backward(x, self.weight.value, g)
        self.weight.accumulate(gw)
        if self.bias is not None:
            self.bias.accumulate(gb)
        return gx


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.weight = Param(np.ones(c))
        self.bias = Param(np.zeros(c))
        self._eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight.value, self.bias.value, self._eps)

    def backward(self, cache, g):
        gx, gg, gb = T.layer_norm_backward(require_cache(cache, "LayerNorm"), g)
        self.weight.accumulate(gg)
        self.bias.accumulate(gb)
        return gx


class Conv2d(Module):
    """k x k grouped convolution with same-style padding given explicitly."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, groups: int = 1, bias: bool = True, zero_init: bool = False):
        shape = (k, k, cin // groups, cout)
        self.weight = Param(np.zeros(shape) if zero_init else T.trunc_normal(rng, shape))
        self.bias = Param(np.zeros(cout)) if bias else None
        self._stride = stride
        self._padding = (k - 1) // 2 if padding is None else padding
        self._groups = groups

    @property
    def kernel(self) -> int:
        return self.weight.shape[0]

    @property
    def stride(self) -> int:
        return self._stride

    def forward(self, x):
        y = T.conv2d(x, self.weight.value, None if self.bias is None else self.bias.value,
                     self._stride, self._padding, self._groups)
        return y, x

    def backward(self, cache, g, need_input_grad: bool = True):
        x = require_cache(cache, "Conv2d")
        gx, gw, gb = T.conv2d_backward(x, self.weight.value, g, self._stride, self._padding,
                                       self._groups, need_input_grad)
        self.weight.accumulate(gw)
        if self.bias is not None:
            self.bias.accumulate(gb)
        return gx

"""Offset generation sub-network shared across offset groups."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .module import Conv2d, LayerNorm, Module, require_cache


class OffsetNetwork(Module):
    """Depthwise k x k stride-r conv, LayerNorm, GELU, then a bias-free 1x1 conv to 2 channels.

    The same weights process every channel group of the query map. The
    final projection starts at zero, so a fresh network predicts zero offsets.
    """

    def __init__(self, group_channels: int, kernel: int, stride: int, rng: np.random.Generator):
        if kernel < stride:
            raise ConfigError(f"offset kernel {kernel} smaller than stride {stride}")
        if kernel % 2 == 0:
            raise ConfigError(f"offset kernel must be odd for same padding, got {kernel}")
        self.dw = Conv2d(group_channels, group_channels, kernel, rng, stride=stride,
                         groups=group_channels)
        self.norm = LayerNorm(group_channels)
        self.proj = Conv2d(group_channels, 2, 1, rng, bias=False, zero_init=True)

    @property
    def kernel(self) -> int:
        return self.dw.kernel

    @property
    def stride(self) -> int:
        return self.dw.stride

    def forward(self, q: np.ndarray, groups: int):
        """Map ``B x H x W x C`` queries to ``B x G x H/r x W/r x 2`` offsets."""
        b, h, w, c = q.shape
        r = self.stride
        if c % groups:
            raise ConfigError(f"channels {c} not divisible by offset groups {groups}")
        if h % r or w % r:
            raise ConfigError(f"feature map {h}x{w} not divisible by downsample factor {r}")
        cg = c // groups
        if cg != self.norm.weight.shape[0]:
            raise ConfigError(f"offset network built for {self.norm.weight.shape[0]} channels, got {cg}")
        qg = q.reshape(b, h, w, groups, cg).transpose(0, 3, 1, 2, 4).reshape(b * groups, h, w, cg)
        t1, c1 = self.dw.forward(qg)
        t2, c2 = self.norm.forward(t1)
        t3 = T.gelu(t2)
        off, c4 = self.proj.forward(t3)
        hg, wg = off.shape[1:3]
        return off.reshape(b, groups, hg, wg, 2), (q.shape, groups, c1, c2, t2, c4)

    def backward(self, cache, grad_offsets):
        qshape, groups, c1, c2, t2, c4 = require_cache(cache, "OffsetNetwork")
        b, h, w, c = qshape
        g = grad_offsets.reshape((b * groups,) + grad_offsets.shape[2:])
        g = self.proj.backward(c4, g)
        g = T.gelu_backward(t2, g)
        g = self.norm.backward(c2, g)
        g = self.dw.backward(c1, g)
        return g.reshape(b, groups, h, w, c // groups).transpose(0, 2, 3, 1, 4).reshape(qshape)


def generate_offsets(net: OffsetNetwork, q: np.ndarray, groups: int) -> np.ndarray:
    return net.forward(q, groups)[0]

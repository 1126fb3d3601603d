"""Non-deformable building blocks and the transformer block.

Includes dense multi-head self-attention (used as a reference for the
deformable layer), neighborhood attention, the local perception unit,
ConvFFN, the overlapped convolutional stem and downsampling layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dmha import DmhaLayer, DmhaTrace, dmha_backward, dmha_forward
from .errors import ConfigError, DimensionError
from .module import Conv2d, LayerNorm, Linear, Module, require_cache
from .tensor import Param


@dataclass(frozen=True)
class BlockConfig:
    kind: str  # "local" or "deformable"
    channels: int
    heads: int
    mlp_ratio: float = 4.0
    drop_path: float = 0.0

    def __post_init__(self):
        if self.kind not in ("local", "deformable"):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if not 0.0 <= self.drop_path < 1.0:
            raise ConfigError("drop_path must lie in [0, 1)")


# ------------------------------------------------------------ dense MHSA

def mhsa_forward(weights, x: np.ndarray, heads: int, rpb_table: np.ndarray | None = None) -> np.ndarray:
    """Global multi-head self-attention over all H*W tokens.

    ``weights`` is any object with ``wq, wk, wv, wo`` :class:`Linear`
    attributes (a :class:`DmhaLayer` works). ``rpb_table`` optionally adds a
    per-head bias ``table[m, dy + H - 1, dx + W - 1]`` with
    ``(dy, dx) = query - key`` in pixels.
    """
    b, h, w, c = x.shape
    if c % heads:
        raise ConfigError(f"channels {c} not divisible by heads {heads}")
    d = c // heads
    n = h * w

    def split(t):
        return t.reshape(b, n, heads, d).transpose(0, 2, 1, 3)

    qh = split(weights.wq.forward(x)[0])
    kh = split(weights.wk.forward(x)[0])
    vh = split(weights.wv.forward(x)[0])
    scores = (qh @ kh.transpose(0, 1, 3, 2)) / math.sqrt(d)
    if rpb_table is not None:
        iy, ix = np.divmod(np.arange(n), w)
        dy = iy[:, None] - iy[None, :] + h - 1
        dx = ix[:, None] - ix[None, :] + w - 1
        scores = scores + rpb_table[:, dy, dx][None]
    attn = T.softmax_lastdim(scores)
    o = (attn @ vh).transpose(0, 2, 1, 3).reshape(b, h, w, c)
    return weights.wo.forward(o)[0]


# -------------------------------------------------- neighborhood attention

def neighborhood_index(h: int, w: int, k: int):
    """Key indices and bias-table indices for K x K windows kept inside the map.

    Returns ``(keys, rel_y, rel_x)``, each HW x K^2. ``keys`` holds flat key
    positions; ``rel_*`` index the (2K-1) x (2K-1) table by
    ``query - key + K - 1``.
    """
    if k % 2 == 0 or k < 1:
        raise ConfigError(f"neighborhood kernel must be odd and positive, got {k}")
    if k > min(h, w):
        raise ConfigError(f"neighborhood kernel {k} exceeds feature map {h}x{w}")
    half = k // 2
    start_y = np.clip(np.arange(h) - half, 0, h - k)
    start_x = np.clip(np.arange(w) - half, 0, w - k)
    ky = start_y[:, None] + np.arange(k)[None, :]  # H x K
    kx = start_x[:, None] + np.arange(k)[None, :]  # W x K
    qy, qx = np.divmod(np.arange(h * w), w)
    key_y = ky[qy][:, :, None]  # HW x K x 1
    key_x = kx[qx][:, None, :]  # HW x 1 x K
    keys = (key_y * w + key_x).reshape(h * w, k * k)
    rel_y = (qy[:, None, None] - key_y + k - 1) + np.zeros_like(key_x)
    rel_x = (qx[:, None, None] - key_x + k - 1) + np.zeros_like(key_y)
    return keys, rel_y.reshape(h * w, k * k), rel_x.reshape(h * w, k * k)


class NeighborhoodAttention(Module):
    def __init__(self, dim: int, heads: int, kernel: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"channels {dim} not divisible by heads {heads}")
        if kernel % 2 == 0:
            raise ConfigError(f"neighborhood kernel must be odd, got {kernel}")
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.rpb_table = Param(np.zeros((heads, 2 * kernel - 1, 2 * kernel - 1)))
        self._heads = heads
        self._kernel = kernel

    @property
    def heads(self):
        return self._heads

    @property
    def kernel(self):
        return self._kernel

    def forward(self, x):
        b, h, w, c = x.shape
        m, kk = self._heads, self._kernel
        d = c // m
        keys, rel_y, rel_x = neighborhood_index(h, w, kk)
        q, cq = self.wq.forward(x)
        k, ck = self.wk.forward(x)
        v, cv = self.wv.forward(x)
        qh = q.reshape(b, h * w, m, d).transpose(0, 2, 1, 3)
        kh = k.reshape(b, h * w, m, d).transpose(0, 2, 1, 3)
        vh = v.reshape(b, h * w, m, d).transpose(0, 2, 1, 3)
        kg = kh[:, :, keys]  # B x M x HW x K^2 x d
        vg = vh[:, :, keys]
        scale = 1.0 / math.sqrt(d)
        scores = (qh[:, :, :, None, :] @ kg.swapaxes(-1, -2))[:, :, :, 0, :] * scale
        scores = scores + self.rpb_table.value[:, rel_y, rel_x][None]
        attn = T.softmax_lastdim(scores)
        oh = (attn[:, :, :, None, :] @ vg)[:, :, :, 0, :]
        o = oh.transpose(0, 2, 1, 3).reshape(b, h, w, c)
        y, co = self.wo.forward(o)
        return y, (x.shape, keys, rel_y, rel_x, cq, ck, cv, qh, kg, vg, attn, scale, co)

    def backward(self, cache, grad_out):
        (shape, keys, rel_y, rel_x, cq, ck, cv, qh, kg, vg, attn, scale,
         co) = require_cache(cache, "NeighborhoodAttention")
        b, h, w, c = shape
        m = self._heads
        d = c // m
        n = h * w
        go = self.wo.backward(co, grad_out)
        goh = go.reshape(b, n, m, d).transpose(0, 2, 1, 3)
        gattn = (goh[:, :, :, None, :] @ vg.swapaxes(-1, -2))[:, :, :, 0, :]
        gvg = attn[..., None] * goh[:, :, :, None, :]
        gs = T.softmax_backward(attn, gattn)
        gqh = (gs[:, :, :, None, :] @ kg)[:, :, :, 0, :] * scale
        gkg = gs[..., None] * qh[:, :, :, None, :] * scale

        gtable = np.zeros_like(self.rpb_table.value)
        np.add.at(gtable, (slice(None), rel_y, rel_x), gs.sum(axis=0))
        self.rpb_table.accumulate(gtable)

        flat = keys.ravel()

        def scatter(gg):
            # B x M x HW x K^2 x d -> B x M x HW x d, summing over duplicate keys
            out = np.zeros((n, b, m, d))
            np.add.at(out, flat, gg.reshape(b, m, -1, d).transpose(2, 0, 1, 3))
            return out.transpose(1, 2, 0, 3)

        gkh = scatter(gkg)
        gvh = scatter(gvg)

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(b, h, w, c)

        gx = self.wq.backward(cq, merge(gqh))
        gx += self.wk.backward(ck, merge(gkh))
        gx += self.wv.backward(cv, merge(gvh))
        return gx


def neighborhood_attn_forward(layer: NeighborhoodAttention, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)[0]


# ----------------------------------------------------------- conv modules

class LPU(Module):
    """Residual 3x3 depthwise convolution."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dw = Conv2d(dim, dim, 3, rng, groups=dim)

    def forward(self, x):
        y, c = self.dw.forward(x)
        return x + y, c

    def backward(self, cache, g):
        return g + self.dw.backward(cache, g)


class ConvFFN(Module):
    """fc1, residual 3x3 depthwise conv, GELU, fc2."""

    def __init__(self, dim: int, mlp_ratio: float, rng: np.random.Generator):
        hidden = int(round(dim * mlp_ratio))
        self.fc1 = Linear(dim, hidden, rng)
        self.dw = Conv2d(hidden, hidden, 3, rng, groups=hidden)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        h1, c1 = self.fc1.forward(x)
        dwo, c2 = self.dw.forward(h1)
        h2 = h1 + dwo
        h3 = T.gelu(h2)
        y, c4 = self.fc2.forward(h3)
        return y, (c1, c2, h2, c4)

    def backward(self, cache, g):
        c1, c2, h2, c4 = require_cache(cache, "ConvFFN")
        g = self.fc2.backward(c4, g)
        g = T.gelu_backward(h2, g)
        g = g + self.dw.backward(c2, g)
        return self.fc1.backward(c1, g)


class PatchEmbed(Module):
    """Overlapped stem: two (3x3 stride-2 conv, LN, GELU) stages, stride 4 overall."""

    def __init__(self, in_ch: int, dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_ch, dim // 2, 3, rng, stride=2, padding=1)
        self.norm1 = LayerNorm(dim // 2)
        self.conv2 = Conv2d(dim // 2, dim, 3, rng, stride=2, padding=1)
        self.norm2 = LayerNorm(dim)

    def forward(self, image):
        if image.ndim != 4 or image.shape[1] % 4 or image.shape[2] % 4:
            raise ConfigError(f"stem input must be B x H x W x C with H, W divisible by 4, got {image.shape}")
        a, c1 = self.conv1.forward(image)
        an, c2 = self.norm1.forward(a)
        b, c3 = self.conv2.forward(T.gelu(an))
        bn, c4 = self.norm2.forward(b)
        return T.gelu(bn), (c1, c2, an, c3, c4, bn)

    def backward(self, cache, g):
        c1, c2, an, c3, c4, bn = require_cache(cache, "PatchEmbed")
        g = self.norm2.backward(c4, T.gelu_backward(bn, g))
        g = self.conv2.backward(c3, g)
        g = self.norm1.backward(c2, T.gelu_backward(an, g))
        return self.conv1.backward(c1, g, need_input_grad=False)


def patch_embed(stem: PatchEmbed, image: np.ndarray) -> np.ndarray:
    return stem.forward(image)[0]


class Downsample(Module):
    """3x3 stride-2 convolution doubling channels, then LN."""

    def __init__(self, dim: int, out_dim: int, rng: np.random.Generator):
        self.conv = Conv2d(dim, out_dim, 3, rng, stride=2, padding=1)
        self.norm = LayerNorm(out_dim)

    def forward(self, x):
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise ConfigError(f"downsampling needs even spatial dims, got {x.shape[1]}x{x.shape[2]}")
        y, c1 = self.conv.forward(x)
        y, c2 = self.norm.forward(y)
        return y, (c1, c2)

    def backward(self, cache, g):
        c1, c2 = require_cache(cache, "Downsample")
        return self.conv.backward(c1, self.norm.backward(c2, g))


def downsample(layer: Downsample, x: np.ndarray) -> np.ndarray:
    return layer.forward(x)[0]


# -------------------------------------------------------- transformer block

class Block(Module):
    """LPU, then attention and ConvFFN residual branches, each pre-normalized."""

    def __init__(self, cfg: BlockConfig, rng: np.random.Generator, *, kernel: int = 7,
                 groups: int = 1, downsample: int = 1, offset_kernel: int = 3,
                 table_size: tuple[int, int] | None = None):
        self._cfg = cfg
        c = cfg.channels
        self.lpu = LPU(c, rng)
        self.norm1 = LayerNorm(c)
        if cfg.kind == "local":
            self.attn = NeighborhoodAttention(c, cfg.heads, kernel, rng)
        else:
            self.attn = DmhaLayer(c, cfg.heads, groups, downsample, offset_kernel, rng,
                                  table_size=table_size)
        self.norm2 = LayerNorm(c)
        self.ffn = ConvFFN(c, cfg.mlp_ratio, rng)

    @property
    def config(self) -> BlockConfig:
        return self._cfg

    @property
    def kind(self) -> str:
        return self._cfg.kind

    def _drop_mask(self, batch, training, rng):
        p = self._cfg.drop_path
        if not training or p == 0.0:
            return None
        if rng is None:
            raise ConfigError("training with drop path needs a random generator")
        keep = (rng.random(batch) >= p).astype(np.float64) / (1.0 - p)
        return keep[:, None, None, None]

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None):
        if x.ndim != 4 or x.shape[3] != self._cfg.channels:
            raise DimensionError(f"block expects B x H x W x {self._cfg.channels}, got {x.shape}")
        z1, c_lpu = self.lpu.forward(x)
        n1, c_n1 = self.norm1.forward(z1)
        if self.kind == "local":
            a, c_attn = self.attn.forward(n1)
        else:
            a, c_attn = dmha_forward(self.attn, n1, want_trace=True)
        m1 = self._drop_mask(x.shape[0], training, rng)
        z2 = z1 + (a if m1 is None else a * m1)
        n2, c_n2 = self.norm2.forward(z2)
        f, c_ffn = self.ffn.forward(n2)
        m2 = self._drop_mask(x.shape[0], training, rng)
        out = z2 + (f if m2 is None else f * m2)
        return out, (c_lpu, c_n1, c_attn, m1, c_n2, c_ffn, m2)

    def backward(self, cache, g):
        c_lpu, c_n1, c_attn, m1, c_n2, c_ffn, m2 = require_cache(cache, "Block")
        gz2 = g
        gf = g if m2 is None else g * m2
        gz2 = gz2 + self.norm2.backward(c_n2, self.ffn.backward(c_ffn, gf))
        ga = gz2 if m1 is None else gz2 * m1
        if self.kind == "local":
            gn1 = self.attn.backward(c_attn, ga)
        else:
            gn1 = dmha_backward(self.attn, c_attn, ga)
        gz1 = gz2 + self.norm1.backward(c_n1, gn1)
        return self.lpu.backward(c_lpu, gz1)

    @staticmethod
    def trace_of(cache):
        """The DMHA trace stored in a deformable block's cache (None for local blocks)."""
        return cache[2] if isinstance(cache[2], DmhaTrace) else None


def block_forward(block: Block, x: np.ndarray) -> np.ndarray:
    return block.forward(x)[0]

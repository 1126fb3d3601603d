"""Deformable multi-head attention.

All queries of a feature map share one set of deformed key/value locations
per offset group. Keys and values are bilinearly sampled from the input map
at reference points shifted by predicted offsets, then projected; each head
attends from every query to the sampled points of its group, with an
attention bias read from a relative-position table at the continuous
query-key displacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, StateError
from .module import Linear, Module
from .offsetnet import OffsetNetwork
from .sampling import (bilinear_sample, bilinear_sample_backward, clip_backward, clip_locations,
                       denormalize, reference_grid, sample_pixels, sample_pixels_backward)
from .tensor import Param


@dataclass
class DmhaTrace:
    """Intermediate state of one forward pass.

    ``sample_grid`` is B x G x H_G x W_G x 2 (clipped, normalized);
    ``attention`` is B x M x HW x N_s; ``sampled_features`` is B x H_G x W_G x C.
    """

    sample_grid: np.ndarray
    attention: np.ndarray
    sampled_features: np.ndarray
    heads_per_group: int
    feature_size: tuple
    _saved: tuple | None = field(default=None, repr=False)

    @property
    def groups(self) -> int:
        return self.sample_grid.shape[1]

    @property
    def num_samples(self) -> int:
        return self.sample_grid.shape[2] * self.sample_grid.shape[3]

    def key_locations(self) -> np.ndarray:
        """Deformed key locations flattened to B x G x N_s x 2."""
        b, g = self.sample_grid.shape[:2]
        return self.sample_grid.reshape(b, g, -1, 2)


# ------------------------------------------------- deformable position bias

def _displacements(query_grid: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """(query - key) / 2 for every pair: keys B x G x N_s x 2 -> B x G x HW x N_s x 2."""
    qf = query_grid.reshape(-1, 2)
    return (qf[None, None, :, None, :] - keys[:, :, None, :, :]) * 0.5


def _rpb_forward(table: np.ndarray, query_grid: np.ndarray, keys: np.ndarray, heads_per_group: int):
    """Bias for all heads: table M x Th x Tw, keys B x G x N_s x 2 -> B x M x HW x N_s."""
    m, th, tw = table.shape
    b, g, ns, _ = keys.shape
    disp = _displacements(query_grid, keys)
    px = denormalize(disp[..., 0], tw)
    py = denormalize(disp[..., 1], th)
    tmap = table.transpose(1, 2, 0)
    bias = np.empty((b, m, px.shape[2], ns))
    for bi in range(b):
        for gi in range(g):
            hs = slice(gi * heads_per_group, (gi + 1) * heads_per_group)
            bias[bi, hs] = sample_pixels(tmap[:, :, hs], px[bi, gi], py[bi, gi]).transpose(2, 0, 1)
    return bias, (px, py)


def _rpb_backward(table, saved, grad_bias, heads_per_group: int):
    """Returns (grad_table, grad_keys) with grad_keys shaped B x G x N_s x 2."""
    px, py = saved
    m, th, tw = table.shape
    b, g = px.shape[:2]
    tmap = table.transpose(1, 2, 0)
    gtable = np.zeros((th, tw, m))
    gkeys = np.zeros((b, g, px.shape[3], 2))
    for bi in range(b):
        for gi in range(g):
            hs = slice(gi * heads_per_group, (gi + 1) * heads_per_group)
            gt, gpx, gpy = sample_pixels_backward(
                tmap[:, :, hs], px[bi, gi], py[bi, gi], grad_bias[bi, hs].transpose(1, 2, 0))
            gtable[:, :, hs] += gt
            # d disp / d key = -1/2, d pixel / d disp = n/2
            gkeys[bi, gi, :, 0] = -0.25 * tw * gpx.sum(axis=0)
            gkeys[bi, gi, :, 1] = -0.25 * th * gpy.sum(axis=0)
    return gtable.transpose(2, 0, 1), gkeys


def deform_rpb(rpb_table: np.ndarray, query_grid: np.ndarray, key_locs: np.ndarray,
               head: int, group_of_head: int = 0) -> np.ndarray:
    """Relative position bias of one head at continuous key locations.

    ``key_locs`` is either B x H_G x W_G x 2 (the head's group) or
    B x G x H_G x W_G x 2, in which case ``group_of_head`` selects the group.
    Returns B x HW x N_s.
    """
    if key_locs.ndim == 5:
        key_locs = key_locs[:, group_of_head]
    b = key_locs.shape[0]
    keys = key_locs.reshape(b, 1, -1, 2)
    bias, _ = _rpb_forward(rpb_table[head:head + 1], query_grid, keys, 1)
    return bias[:, 0]


def deform_rpb_backward(rpb_table, query_grid, key_locs, head, grad_bias):
    """Gradients of :func:`deform_rpb` w.r.t. the head's table and key locations."""
    b = key_locs.shape[0]
    keys = key_locs.reshape(b, 1, -1, 2)
    _, saved = _rpb_forward(rpb_table[head:head + 1], query_grid, keys, 1)
    gt, gk = _rpb_backward(rpb_table[head:head + 1], saved, grad_bias[:, None], 1)
    return gt[0], gk.reshape(key_locs.shape)


# ------------------------------------------------------------------- layer

class DmhaLayer(Module):
    """Parameters and configuration of one deformable attention layer.

    ``table_size`` is the nominal feature map size (H, W) the relative
    position table is built for; pass ``use_rpb=False`` to drop the bias.
    """

    def __init__(self, dim: int, heads: int, groups: int, downsample: int, offset_kernel: int,
                 rng: np.random.Generator, table_size: tuple[int, int] | None = None,
                 use_rpb: bool = True):
        if dim % heads:
            raise ConfigError(f"channels {dim} not divisible by heads {heads}")
        if heads % groups:
            raise ConfigError(f"heads {heads} not divisible by offset groups {groups}")
        if dim % groups:
            raise ConfigError(f"channels {dim} not divisible by offset groups {groups}")
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.offset_net = OffsetNetwork(dim // groups, offset_kernel, downsample, rng)
        self.rpb_table = None
        if use_rpb:
            if table_size is None:
                raise ConfigError("relative position table needs a nominal feature size")
            th, tw = table_size
            self.rpb_table = Param(np.zeros((heads, 2 * th - 1, 2 * tw - 1)))
        self._dim = dim
        self._heads = heads
        self._groups = groups
        self._r = downsample

    dim = property(lambda self: self._dim)
    heads = property(lambda self: self._heads)
    groups = property(lambda self: self._groups)
    downsample = property(lambda self: self._r)

    @property
    def head_dim(self) -> int:
        return self._dim // self._heads

    def forward(self, x: np.ndarray):
        return dmha_forward(self, x, want_trace=True)

    def backward(self, trace, grad_out):
        return dmha_backward(self, trace, grad_out)


def dmha_forward(layer: DmhaLayer, x: np.ndarray, want_trace: bool = False):
    """Forward pass. Returns ``(output, trace)``; trace is None unless requested."""
    if x.ndim != 4 or x.shape[3] != layer.dim:
        raise DimensionError(f"DMHA expects B x H x W x {layer.dim}, got {x.shape}")
    b, h, w, c = x.shape
    r, m, g = layer.downsample, layer.heads, layer.groups
    if h % r or w % r:
        raise ConfigError(f"feature map {h}x{w} not divisible by downsample factor {r}")
    d, cg, hpg = c // m, c // g, m // g
    hg, wg = h // r, w // r
    ns = hg * wg

    q, cq = layer.wq.forward(x)
    offsets, coff = layer.offset_net.forward(q, g)
    T.check_finite(offsets, "offsets")
    pos = reference_grid(hg, wg)[None, None] + offsets
    grid = clip_locations(pos)

    xs = np.empty((b, hg, wg, c))
    for gi in range(g):
        cs = slice(gi * cg, (gi + 1) * cg)
        xs[..., cs] = bilinear_sample(np.ascontiguousarray(x[..., cs]), grid[:, gi])
    T.check_finite(xs, "sampling")

    k, ck = layer.wk.forward(xs)
    v, cv = layer.wv.forward(xs)
    qh = q.reshape(b, h * w, m, d).transpose(0, 2, 1, 3)
    kh = k.reshape(b, ns, m, d).transpose(0, 2, 1, 3)
    vh = v.reshape(b, ns, m, d).transpose(0, 2, 1, 3)
    scale = 1.0 / math.sqrt(d)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    query_grid = None
    rpb_saved = None
    if layer.rpb_table is not None:
        query_grid = reference_grid(h, w)
        bias, rpb_saved = _rpb_forward(layer.rpb_table.value, query_grid,
                                       grid.reshape(b, g, ns, 2), hpg)
        scores = scores + bias
    T.check_finite(scores, "attention scores")
    attn = T.softmax_lastdim(scores)
    oh = attn @ vh
    o = oh.transpose(0, 2, 1, 3).reshape(b, h, w, c)
    y, co = layer.wo.forward(o)
    T.check_finite(y, "output projection")

    if not want_trace:
        return y, None
    saved = (x, cq, coff, pos, grid, ck, cv, qh, kh, vh, scale, rpb_saved, co)
    return y, DmhaTrace(grid, attn, xs, hpg, (h, w), saved)


def dmha_backward(layer: DmhaLayer, trace: DmhaTrace | None, grad_out: np.ndarray) -> np.ndarray:
    """Reverse pass. Accumulates parameter gradients and returns the input gradient."""
    if trace is None or trace._saved is None:
        raise StateError("dmha_backward needs the trace of a forward pass (want_trace=True)")
    x, cq, coff, pos, grid, ck, cv, qh, kh, vh, scale, rpb_saved, co = trace._saved
    attn = trace.attention
    b, h, w, c = x.shape
    m, g = layer.heads, layer.groups
    d, cg, hpg = c // m, c // g, m // g
    hg, wg = grid.shape[2:4]
    ns = hg * wg

    go = layer.wo.backward(co, grad_out)
    goh = go.reshape(b, h * w, m, d).transpose(0, 2, 1, 3)
    gattn = goh @ vh.transpose(0, 1, 3, 2)
    gvh = attn.transpose(0, 1, 3, 2) @ goh
    gscores = T.softmax_backward(attn, gattn)
    gqh = (gscores @ kh) * scale
    gkh = (gscores.transpose(0, 1, 3, 2) @ qh) * scale

    ggrid = np.zeros_like(grid)
    if layer.rpb_table is not None:
        gtable, gkeys = _rpb_backward(layer.rpb_table.value, rpb_saved, gscores, hpg)
        layer.rpb_table.accumulate(gtable)
        ggrid += gkeys.reshape(grid.shape)

    gk = gkh.transpose(0, 2, 1, 3).reshape(b, hg, wg, c)
    gv = gvh.transpose(0, 2, 1, 3).reshape(b, hg, wg, c)
    gxs = layer.wk.backward(ck, gk) + layer.wv.backward(cv, gv)

    gx = np.zeros_like(x)
    for gi in range(g):
        cs = slice(gi * cg, (gi + 1) * cg)
        gxc, ggc = bilinear_sample_backward(np.ascontiguousarray(x[..., cs]), grid[:, gi], gxs[..., cs])
        gx[..., cs] += gxc
        ggrid[:, gi] += ggc

    goffsets = clip_backward(pos, ggrid)
    gq = gqh.transpose(0, 2, 1, 3).reshape(b, h, w, c)
    gq = gq + layer.offset_net.backward(coff, goffsets)
    gx += layer.wq.backward(cq, gq)
    return gx

"""Dense float64 kernels with analytic backward passes.

Tensors are plain ``numpy.ndarray`` objects in float64. Feature maps use the
B x H x W x C layout. Every kernel comes as a ``forward`` function and a
matching ``*_backward`` function; callers compose them explicitly.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError, NumericError

DTYPE = np.float64
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Param:
    """A trainable tensor paired with its accumulated gradient.

    The gradient buffer is allocated lazily so large models can be built for
    shape or cost inspection without doubling memory.
    """

    __slots__ = ("value", "_grad")

    def __init__(self, value):
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {self.value.shape}")
        if self._grad is None:
            self._grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self):
        return f"Param(shape={self.value.shape})"


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, step: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values produced at step '{step}'")
    return x


# ---------------------------------------------------------------- matmul

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(a, b, grad_out):
    return grad_out @ b.T, a.T @ grad_out


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Apply ``x @ w + b`` over the last axis of ``x``."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear shape mismatch: input {x.shape} vs weight {w.shape}")
    y = (x.reshape(-1, w.shape[0]) @ w).reshape(x.shape[:-1] + (w.shape[1],))
    if b is not None:
        y = y + b
    return y


def linear_backward(x, w, grad_out):
    """Returns (grad_x, grad_w, grad_b)."""
    g2 = grad_out.reshape(-1, w.shape[1])
    x2 = x.reshape(-1, w.shape[0])
    gx = (g2 @ w.T).reshape(x.shape)
    return gx, x2.T @ g2, g2.sum(axis=0)


# ---------------------------------------------------------------- softmax

def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last dimension, got shape {x.shape}")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Jacobian-vector product ``y * (g - <g, y>)`` given the softmax output."""
    return y * (grad_out - (grad_out * y).sum(axis=-1, keepdims=True))


# ------------------------------------------------------------- layer norm

def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis. Returns ``(y, cache)``."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    if x.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise DimensionError(
            f"layer_norm channel mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma)


def layer_norm_backward(cache, grad_out):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, rstd, gamma = cache
    c = xhat.shape[-1]
    lead = tuple(range(grad_out.ndim - 1))
    ggamma = (grad_out * xhat).sum(axis=lead)
    gbeta = grad_out.sum(axis=lead)
    gxhat = grad_out * gamma
    gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                 - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / c)
    return gx, ggamma, gbeta


# ------------------------------------------------------------------- GELU

def gelu(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return grad_out * (cdf + x * pdf)


# ------------------------------------------------------------- convolution

def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _conv_check(x, w, stride, padding, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    kh, kw, cin_g, cout = w.shape
    cin = x.shape[3]
    if kh != kw:
        raise ConfigError(f"conv2d supports square kernels only, got {kh}x{kw}")
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"channels ({cin} in, {cout} out) not divisible by groups={groups}")
    if cin // groups != cin_g:
        raise DimensionError(
            f"weight expects {cin_g} input channels per group, input gives {cin // groups}")
    if stride < 1 or padding < 0:
        raise ConfigError("stride must be >= 1 and padding >= 0")
    ho = conv_out_size(x.shape[1], kh, stride, padding)
    wo = conv_out_size(x.shape[2], kh, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape} and kernel {kh}")
    return kh, ho, wo


def _window(xp, di, dj, ho, wo, stride):
    return xp[:, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride, :]


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0, groups: int = 1):
    """Grouped cross-correlation on B x H x W x C maps.

    ``w`` has shape k x k x (Cin/groups) x Cout. Depthwise convolution is
    ``groups == Cin``; pointwise is ``k == 1``.
    """
    k, ho, wo = _conv_check(x, w, stride, padding, groups)
    b = x.shape[0]
    cin, cout = x.shape[3], w.shape[3]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    if groups == 1:
        cols = np.concatenate([_window(xp, di, dj, ho, wo, stride)
                               for di in range(k) for dj in range(k)], axis=-1)
        y = (cols.reshape(-1, k * k * cin) @ w.reshape(k * k * cin, cout)).reshape(b, ho, wo, cout)
    elif groups == cin and cout == cin:
        y = np.zeros((b, ho, wo, cout))
        for di in range(k):
            for dj in range(k):
                y += _window(xp, di, dj, ho, wo, stride) * w[di, dj, 0]
    else:
        cg_in, cg_out = cin // groups, cout // groups
        wg = w.reshape(k, k, cg_in, groups, cg_out)
        y = np.zeros((b, ho, wo, groups, cg_out))
        for di in range(k):
            for dj in range(k):
                win = _window(xp, di, dj, ho, wo, stride).reshape(b, ho, wo, groups, cg_in)
                y += np.einsum("bhwgc,cgo->bhwgo", win, wg[di, dj])
        y = y.reshape(b, ho, wo, cout)
    if bias is not None:
        y = y + bias
    return y


def conv2d_backward(x, w, grad_out, stride: int = 1, padding: int = 0, groups: int = 1,
                    need_input_grad: bool = True):
    """Returns (grad_x, grad_w, grad_bias). ``grad_x`` is None when not requested."""
    k, ho, wo = _conv_check(x, w, stride, padding, groups)
    b, h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x
    gxp = np.zeros_like(xp) if need_input_grad else None
    gw = np.zeros_like(w)
    gb = grad_out.sum(axis=(0, 1, 2))
    if groups == 1:
        g2 = grad_out.reshape(-1, cout)
        for di in range(k):
            for dj in range(k):
                win = _window(xp, di, dj, ho, wo, stride)
                gw[di, dj] = win.reshape(-1, cin).T @ g2
                if gxp is not None:
                    _window(gxp, di, dj, ho, wo, stride)[...] += (g2 @ w[di, dj].T).reshape(b, ho, wo, cin)
    elif groups == cin and cout == cin:
        for di in range(k):
            for dj in range(k):
                win = _window(xp, di, dj, ho, wo, stride)
                gw[di, dj, 0] = (win * grad_out).sum(axis=(0, 1, 2))
                if gxp is not None:
                    _window(gxp, di, dj, ho, wo, stride)[...] += grad_out * w[di, dj, 0]
    else:
        cg_in, cg_out = cin // groups, cout // groups
        wg = w.reshape(k, k, cg_in, groups, cg_out)
        gg = grad_out.reshape(b, ho, wo, groups, cg_out)
        gwg = gw.reshape(k, k, cg_in, groups, cg_out)
        for di in range(k):
            for dj in range(k):
                win = _window(xp, di, dj, ho, wo, stride).reshape(b, ho, wo, groups, cg_in)
                gwg[di, dj] = np.einsum("bhwgc,bhwgo->cgo", win, gg)
                if gxp is not None:
                    gwin = np.einsum("bhwgo,cgo->bhwgc", gg, wg[di, dj])
                    _window(gxp, di, dj, ho, wo, stride)[...] += gwin.reshape(b, ho, wo, cin)
    gx = None
    if gxp is not None:
        gx = gxp[:, padding:padding + h, padding:padding + wd, :] if padding else gxp
    return gx, gw, gb


# ---------------------------------------------------------------- pooling

def global_avg_pool(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] < 1 or x.shape[2] < 1:
        raise DimensionError(f"global_avg_pool expects B x H x W x C with H, W >= 1, got {x.shape}")
    return x.mean(axis=(1, 2))


def global_avg_pool_backward(input_shape, grad_out: np.ndarray) -> np.ndarray:
    b, h, w, c = input_shape
    return np.broadcast_to(grad_out[:, None, None, :] / (h * w), input_shape).copy()


# ----------------------------------------------------------- initialization

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples truncated at two standard deviations (by resampling)."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std

"""Normalized coordinates and differentiable bilinear sampling.

Coordinates are stored as (x, y) pairs, x along the width axis. A normalized
coordinate ``u`` in [-1, 1] maps to the pixel coordinate
``(u + 1) / 2 * n - 0.5``, so that cell centers of an ``n``-cell axis sit at
``u = 2 (j + 0.5) / n - 1``. Lattice neighbours that fall outside the map
contribute zero (zero padding).
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError


def reference_grid(h_g: int, w_g: int) -> np.ndarray:
    """Uniform ``h_g x w_g x 2`` grid of cell-center points in (x, y) order."""
    if h_g < 1 or w_g < 1:
        raise ConfigError(f"reference grid needs positive size, got {h_g}x{w_g}")
    xs = 2.0 * (np.arange(w_g) + 0.5) / w_g - 1.0
    ys = 2.0 * (np.arange(h_g) + 0.5) / h_g - 1.0
    grid = np.empty((h_g, w_g, 2))
    grid[..., 0] = xs[None, :]
    grid[..., 1] = ys[:, None]
    return grid


def denormalize(u, n: int):
    """Normalized coordinate(s) to pixel coordinate(s) on an axis of ``n`` cells."""
    return (np.asarray(u, dtype=np.float64) + 1.0) * 0.5 * n - 0.5


def normalize(p, n: int):
    return (np.asarray(p, dtype=np.float64) + 0.5) * 2.0 / n - 1.0


def clip_locations(locations: np.ndarray) -> np.ndarray:
    return np.clip(locations, -1.0, 1.0)


def clip_backward(locations: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Clamp subgradient: pass-through inside [-1, 1], zero where clamped."""
    return grad_out * ((locations >= -1.0) & (locations <= 1.0))


# ------------------------------------------------------------------ kernels

def _corners(px, py, h, w):
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    for dy, wy, sy in ((0, 1.0 - fy, -1.0), (1, fy, 1.0)):
        for dx, wx, sx in ((0, 1.0 - fx, -1.0), (1, fx, 1.0)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            yield (np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1), valid, wx, wy, sx, sy)


def sample_pixels(z: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Bilinearly sample an ``H x W x C`` map at pixel coordinates.

    ``px`` and ``py`` share an arbitrary shape S; the result is S x C.
    """
    h, w, c = z.shape
    out = np.zeros(px.shape + (c,))
    for yi, xi, valid, wx, wy, _, _ in _corners(px, py, h, w):
        out += (wx * wy * valid)[..., None] * z[yi, xi]
    return out


def sample_pixels_backward(z, px, py, grad_out, need_map_grad: bool = True):
    """Gradients of :func:`sample_pixels` w.r.t. the map and both pixel coordinates.

    Returns ``(grad_z, grad_px, grad_py)``; ``grad_z`` is None when not requested.
    """
    h, w, c = z.shape
    gz = np.zeros((h * w, c)) if need_map_grad else None
    gpx = np.zeros(px.shape)
    gpy = np.zeros(px.shape)
    g2 = grad_out.reshape(-1, c)
    for yi, xi, valid, wx, wy, sx, sy in _corners(px, py, h, w):
        vals = z[yi, xi]
        gdot = (grad_out * vals).sum(axis=-1) * valid
        gpx += sx * wy * gdot
        gpy += sy * wx * gdot
        if gz is not None:
            wgt = (wx * wy * valid).reshape(-1, 1)
            np.add.at(gz, (yi * w + xi).ravel(), wgt * g2)
    return (None if gz is None else gz.reshape(h, w, c)), gpx, gpy


def bilinear_sample(z: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Sample ``B x H x W x C`` maps at normalized ``B x ... x 2`` grid points."""
    if z.ndim != 4 or grid.shape[0] != z.shape[0] or grid.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample: incompatible map {z.shape} and grid {grid.shape}")
    _, h, w, _ = z.shape
    px = denormalize(grid[..., 0], w)
    py = denormalize(grid[..., 1], h)
    return np.stack([sample_pixels(z[b], px[b], py[b]) for b in range(z.shape[0])])


def bilinear_sample_backward(z, grid, grad_out, need_map_grad: bool = True):
    """Returns ``(grad_z, grad_grid)`` for :func:`bilinear_sample`."""
    _, h, w, _ = z.shape
    px = denormalize(grid[..., 0], w)
    py = denormalize(grid[..., 1], h)
    gz = np.zeros_like(z) if need_map_grad else None
    ggrid = np.zeros_like(grid)
    for b in range(z.shape[0]):
        gzb, gpx, gpy = sample_pixels_backward(z[b], px[b], py[b], grad_out[b], need_map_grad)
        if gz is not None:
            gz[b] = gzb
        ggrid[b, ..., 0] = gpx * (0.5 * w)
        ggrid[b, ..., 1] = gpy * (0.5 * h)
    return gz, ggrid


def distance_to_lattice(grid: np.ndarray, h: int, w: int) -> float:
    """Smallest distance (in pixels) of any grid point from a lattice line.

    Bilinear weights are not differentiable on lattice lines; finite-difference
    checks of coordinate gradients need points bounded away from them.
    """
    px = denormalize(grid[..., 0], w)
    py = denormalize(grid[..., 1], h)
    dx = np.abs(px - np.round(px))
    dy = np.abs(py - np.round(py))
    return float(min(dx.min(), dy.min()))

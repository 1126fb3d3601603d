"""Central finite-difference checks for every hand-written backward pass."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import tensor as T
from ..backbone import build_model, get_preset
from ..blocks import Block, BlockConfig, ConvFFN, LPU, NeighborhoodAttention
from ..dmha import DmhaLayer, deform_rpb, deform_rpb_backward, dmha_backward, dmha_forward
from ..errors import NumericError
from ..offsetnet import OffsetNetwork
from ..sampling import (bilinear_sample, bilinear_sample_backward, clip_backward, clip_locations,
                        distance_to_lattice, reference_grid)

STEP = 1e-6
MIN_SAMPLES = 64

# Softmax is invariant to a shift shared by all keys of a query, and a key
# projection bias adds exactly such a shift (q . b_k), so its gradient is
# identically zero. A relative error is meaningless there; these blocks are
# held to an absolute bound on the finite-difference roundoff instead.
ZERO_GRADIENT_SUFFIX = "wk.bias"
ZERO_GRADIENT_ATOL = 1e-7


@dataclass
class BlockResult:
    module: str
    block: str
    max_err: float
    tol: float
    checked: int
    worst: tuple = (0.0, 0.0)  # (analytic, numeric) at the worst coordinate
    metric: str = "rel"  # "abs" for blocks whose exact gradient is identically zero

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}\t{self.module}\t{self.block}\t{self.metric}\t{self.max_err:.3e}\t"
                f"{self.tol:.0e}\t{self.checked}")


def grad_check(f: Callable[[], float], point: dict, analytic: dict, step: float = STEP,
               min_samples: int = MIN_SAMPLES, seed: int = 0, floor: float = 1e-8,
               absolute: bool = False) -> dict:
    """Compare analytic gradients to central differences of ``f``.

    ``point`` maps block names to arrays that ``f`` reads; they are perturbed in
    place and restored. Blocks larger than ``min_samples`` are checked on that
    many randomly chosen coordinates. Returns
    ``{block: (max_err, n_checked, (analytic, numeric) at the worst coordinate)}``.
    The error is ``|a - n| / max(|a|, |n|, floor)``, or ``|a - n|`` when
    ``absolute`` is set.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, arr in point.items():
        ga = np.asarray(analytic[name])
        if ga.shape != arr.shape:
            raise ValueError(f"analytic gradient for {name} has shape {ga.shape}, expected {arr.shape}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"block {name} must be contiguous to be perturbed in place")
        idx = np.arange(flat.size)
        if flat.size > min_samples:
            idx = rng.choice(flat.size, size=min_samples, replace=False)
        worst, pair = 0.0, (0.0, 0.0)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericError(f"non-finite objective while perturbing {name}[{i}]")
            num = (fp - fm) / (2.0 * step)
            a = float(ga.reshape(-1)[i])
            err = abs(a - num)
            if not absolute:
                err /= max(abs(a), abs(num), floor)
            if err >= worst:
                worst, pair = err, (a, num)
        out[name] = (worst, len(idx), pair)
    return out


# ------------------------------------------------------------------ suite

def weighted_sum(y, w) -> float:
    # exact final reduction keeps summation roundoff out of the differences
    return math.fsum((np.asarray(y) * w).ravel())


def randomize_params(module, rng, scale=0.5):
    for name, p in module.named_params():
        if name.endswith("norm.weight") or name.endswith("norm1.weight") or name.endswith("norm2.weight"):
            p.value[...] = 1.0 + rng.uniform(-scale, scale, p.shape) * 0.5
        else:
            p.value[...] = rng.uniform(-scale, scale, p.shape)


def _module_case(module, forward, backward, x, rng):
    """Point/analytic/objective triple for a layer with an input tensor."""
    probe = forward(x)
    weights = rng.uniform(-1.0, 1.0, probe.shape)

    def f():
        return weighted_sum(forward(x), weights)

    module.zero_grad()
    gx = backward(weights)
    point = {"input": x}
    analytic = {"input": gx}
    for name, p in module.named_params():
        point[name] = p.value
        analytic[name] = p.grad.copy()
    return f, point, analytic


class _Stateful:
    """Adapts ``forward -> (y, cache)`` layers to the closure style used here."""

    def __init__(self, layer, forward=None, backward=None):
        self.layer = layer
        self._fwd = forward or layer.forward
        self._bwd = backward or layer.backward
        self.cache = None

    def forward(self, x):
        y, self.cache = self._fwd(x)
        return y

    def backward(self, g):
        return self._bwd(self.cache, g)


def _layer_case(layer, x, rng, fwd=None, bwd=None):
    s = _Stateful(layer, fwd, bwd)
    return _module_case(layer, s.forward, s.backward, x, rng)


def _dyadic(rng, shape, bits: int = 6):
    """Uniform values in [-1, 1] on a 2^-bits grid.

    Products and short sums of such values are exact in float64, so the
    finite differences of the linear kernels carry no roundoff from the
    unperturbed terms.
    """
    return rng.integers(-(1 << bits), (1 << bits) + 1, size=shape) / float(1 << bits)


def _kernel_cases(rng):
    cases = []

    a = _dyadic(rng, (5, 7))
    b = _dyadic(rng, (7, 3))
    wt = _dyadic(rng, (5, 3))
    ga, gb = T.matmul_backward(a, b, wt)
    cases.append(("tensor.matmul", lambda a=a, b=b, wt=wt: weighted_sum(T.matmul(a, b), wt),
                  {"a": a, "b": b}, {"a": ga, "b": gb}, 1e-6))

    x = _dyadic(rng, (4, 6))
    wt = _dyadic(rng, (4, 6))
    gx = T.softmax_backward(T.softmax_lastdim(x), wt)
    cases.append(("tensor.softmax", lambda x=x, wt=wt: weighted_sum(T.softmax_lastdim(x), wt),
                  {"x": x}, {"x": gx}, 1e-6))

    x = _dyadic(rng, (3, 4, 8))
    gamma = rng.uniform(0.5, 1.5, 8)
    beta = _dyadic(rng, 8)
    wt = _dyadic(rng, (3, 4, 8))
    _, cache = T.layer_norm(x, gamma, beta)
    gx, gg, gb = T.layer_norm_backward(cache, wt)
    cases.append(("tensor.layer_norm", lambda x=x, wt=wt: weighted_sum(T.layer_norm(x, gamma, beta)[0], wt),
                  {"x": x, "gamma": gamma, "beta": beta}, {"x": gx, "gamma": gg, "beta": gb}, 1e-6))

    x = _dyadic(rng, (6, 5))
    wt = _dyadic(rng, (6, 5))
    cases.append(("tensor.gelu", lambda x=x, wt=wt: weighted_sum(T.gelu(x), wt),
                  {"x": x}, {"x": T.gelu_backward(x, wt)}, 1e-6))

    for label, cin, cout, k, stride, pad, groups in [
        ("conv2d_dense", 3, 4, 3, 2, 1, 1),
        ("conv2d_depthwise", 4, 4, 3, 1, 1, 4),
        ("conv2d_grouped", 4, 6, 3, 1, 1, 2),
        ("conv2d_pointwise", 5, 3, 1, 1, 0, 1),
    ]:
        x = _dyadic(rng, (2, 6, 6, cin))
        w = _dyadic(rng, (k, k, cin // groups, cout))
        bias = _dyadic(rng, cout)
        y = T.conv2d(x, w, bias, stride, pad, groups)
        wt = _dyadic(rng, y.shape)
        gx, gw, gbias = T.conv2d_backward(x, w, wt, stride, pad, groups)

        def f(x=x, w=w, bias=bias, wt=wt, stride=stride, pad=pad, groups=groups):
            return weighted_sum(T.conv2d(x, w, bias, stride, pad, groups), wt)

        cases.append((f"tensor.{label}", f, {"x": x, "w": w, "bias": bias},
                      {"x": gx, "w": gw, "bias": gbias}, 1e-6))

    x = _dyadic(rng, (2, 3, 4, 5))
    wt = _dyadic(rng, (2, 5))
    cases.append(("tensor.global_avg_pool", lambda x=x, wt=wt: weighted_sum(T.global_avg_pool(x), wt),
                  {"x": x}, {"x": T.global_avg_pool_backward(x.shape, wt)}, 1e-6))
    return cases


def _off_lattice_grid(rng, shape, h, w, margin=1e-2):
    while True:
        grid = rng.uniform(-0.95, 0.95, shape)
        if distance_to_lattice(grid, h, w) >= margin:
            return grid


def _sampling_cases(rng):
    cases = []
    z = rng.uniform(-1, 1, (2, 5, 6, 3))
    grid = _off_lattice_grid(rng, (2, 4, 3, 2), 5, 6)
    wt = rng.uniform(-1, 1, (2, 4, 3, 3))
    gz, gg = bilinear_sample_backward(z, grid, wt)
    cases.append(("sampling.bilinear_sample", lambda wt=wt: weighted_sum(bilinear_sample(z, grid), wt),
                  {"z": z, "grid": grid}, {"z": gz, "grid": gg}, 1e-5))

    loc = rng.uniform(-1.5, 1.5, (3, 4, 2))
    loc[np.abs(np.abs(loc) - 1.0) < 1e-2] = 0.3
    wt = rng.uniform(-1, 1, loc.shape)
    cases.append(("sampling.clip_locations", lambda wt=wt: weighted_sum(clip_locations(loc), wt),
                  {"locations": loc}, {"locations": clip_backward(loc, wt)}, 1e-6))

    h = w = 4
    table = rng.uniform(-1, 1, (2, 2 * h - 1, 2 * w - 1))
    qgrid = reference_grid(h, w)
    while True:
        keys = rng.uniform(-0.9, 0.9, (2, 2, 2, 2))
        disp = (qgrid.reshape(-1, 1, 2)[None] - keys.reshape(2, 1, -1, 2)) * 0.5
        if distance_to_lattice(disp, 2 * h - 1, 2 * w - 1) >= 1e-2:
            break
    wt = rng.uniform(-1, 1, (2, h * w, 4))
    gt, gk = deform_rpb_backward(table, qgrid, keys, 1, wt)
    gtable = np.zeros_like(table)
    gtable[1] = gt
    cases.append(("sampling.deform_rpb",
                  lambda wt=wt: weighted_sum(deform_rpb(table, qgrid, keys, 1), wt),
                  {"table": table, "key_locs": keys}, {"table": gtable, "key_locs": gk}, 1e-5))
    return cases


def _dmha_instance(rng, b=1, h=4, w=4, c=8, m=2, g=2, r=2, k=3):
    """A DMHA layer with non-zero offsets whose sample points avoid lattice lines."""
    while True:
        layer = DmhaLayer(c, m, g, r, k, rng, table_size=(h, w))
        randomize_params(layer, rng)
        layer.offset_net.proj.weight.value[...] = rng.uniform(-0.1, 0.1, layer.offset_net.proj.weight.shape)
        x = rng.uniform(-1, 1, (b, h, w, c))
        _, trace = dmha_forward(layer, x, want_trace=True)
        grid = trace.sample_grid
        keys = trace.key_locations()
        disp = (reference_grid(h, w).reshape(-1, 1, 2)[None, None] - keys[:, :, None]) * 0.5
        ok = (distance_to_lattice(grid, h, w) >= 1e-3
              and distance_to_lattice(disp, 2 * h - 1, 2 * w - 1) >= 1e-3
              and np.all(np.abs(grid) < 1.0 - 1e-3))
        if ok:
            return layer, x


def _layer_cases(rng):
    cases = []

    # offset network
    net = OffsetNetwork(4, 3, 2, rng)
    randomize_params(net, rng)
    x = rng.uniform(-1, 1, (1, 4, 4, 8))
    f, p, a = _layer_case(net, x, rng, fwd=lambda q: net.forward(q, 2))
    cases.append(("offsetnet", f, p, a, 1e-5))

    # full DMHA layer
    layer, x = _dmha_instance(rng)
    f, p, a = _layer_case(layer, x, rng, fwd=lambda t: dmha_forward(layer, t, want_trace=True),
                          bwd=lambda tr, g: dmha_backward(layer, tr, g))
    cases.append(("dmha", f, p, a, 1e-4))

    # neighborhood attention layer
    nat = NeighborhoodAttention(8, 2, 3, rng)
    randomize_params(nat, rng)
    x = rng.uniform(-1, 1, (1, 5, 5, 8))
    f, p, a = _layer_case(nat, x, rng)
    cases.append(("blocks.neighborhood_attn", f, p, a, 1e-4))

    lpu = LPU(6, rng)
    randomize_params(lpu, rng)
    x = rng.uniform(-1, 1, (1, 5, 5, 6))
    f, p, a = _layer_case(lpu, x, rng)
    cases.append(("blocks.lpu", f, p, a, 1e-6))

    ffn = ConvFFN(6, 2.0, rng)
    randomize_params(ffn, rng)
    x = rng.uniform(-1, 1, (1, 4, 4, 6))
    f, p, a = _layer_case(ffn, x, rng)
    cases.append(("blocks.convffn", f, p, a, 1e-5))

    blk = Block(BlockConfig("local", 16, 2), rng, kernel=3)
    randomize_params(blk, rng, 0.3)
    x = rng.uniform(-1, 1, (1, 8, 8, 16))
    f, p, a = _layer_case(blk, x, rng)
    cases.append(("blocks.block_local", f, p, a, 1e-4))

    while True:
        blk = Block(BlockConfig("deformable", 16, 4), rng, groups=2, downsample=2, offset_kernel=3,
                    table_size=(8, 8))
        randomize_params(blk, rng, 0.3)
        blk.attn.offset_net.proj.weight.value[...] *= 0.2
        x = rng.uniform(-1, 1, (1, 8, 8, 16))
        _, cache = blk.forward(x)
        tr = Block.trace_of(cache)
        if distance_to_lattice(tr.sample_grid, 8, 8) >= 1e-3 and np.all(np.abs(tr.sample_grid) < 0.999):
            break
    f, p, a = _layer_case(blk, x, rng)
    cases.append(("blocks.block_deformable", f, p, a, 1e-4))
    return cases


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    probs = T.softmax_lastdim(logits)
    n = logits.shape[0]
    loss = -np.log(probs[np.arange(n), labels]).mean()
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


# One block per kind of computation on the path to the logits. Keys and query
# projections deep in the network carry gradients near 1e-6 at some
# coordinates, where central differences at step 1e-6 are dominated by the
# ~1e-15 roundoff of the loss; those kernels are checked at layer level.
NANO_SUBSET = (
    "stem.conv1.weight",
    "stages.0.blocks.0.attn.wv.weight",
    "stages.0.blocks.1.attn.offset_net.proj.weight",
    "stages.1.down.conv.weight",
    "stages.1.blocks.0.ffn.fc1.weight",
    "stages.1.blocks.1.attn.wv.weight",
    "stages.2.blocks.1.lpu.dw.weight",
    "stages.3.blocks.0.attn.offset_net.proj.weight",
    "stages.3.blocks.0.attn.rpb_table",
    "stages.3.blocks.0.attn.wo.weight",
    "norms.3.weight",
    "head.weight",
)


def _off_lattice(model, cache, margin=1e-4) -> bool:
    """True when every sample point and bias-table lookup avoids lattice lines."""
    for (_, layer), tr in zip(model.dmha_layers(), model.traces(cache)):
        h, w = tr.feature_size
        if distance_to_lattice(tr.sample_grid, h, w) < margin:
            return False
        th, tw = layer.rpb_table.shape[1:]
        keys = tr.key_locations()
        disp = (reference_grid(h, w).reshape(-1, 1, 2)[None, None] - keys[:, :, None]) * 0.5
        if distance_to_lattice(disp, th, tw) < margin:
            return False
    return True


def _nano_case(rng):
    labels = np.array([0, 1])
    while True:
        model = build_model(get_preset("dat-nano"), seed=int(rng.integers(1 << 31)))
        # std-0.02 init leaves deep gradients near the roundoff floor of the loss
        randomize_params(model, rng, 0.2)
        params = dict(model.named_params())
        for name, p in params.items():
            if name.endswith("offset_net.proj.weight"):
                p.value[...] = rng.uniform(-0.05, 0.05, p.shape)
            elif name == "head.weight":
                # confident, partly wrong logits keep the loss gradient well above roundoff
                p.value[...] = rng.uniform(-2.0, 2.0, p.shape)
        image = rng.uniform(-1, 1, (2, 64, 64, 3))
        logits, cache = model.forward(image)
        if _off_lattice(model, cache):
            break

    def f():
        return cross_entropy(model.forward(image)[0], labels)[0]

    model.zero_grad()
    model.backward(cache, cross_entropy(logits, labels)[1])
    point = {n: params[n].value for n in NANO_SUBSET}
    analytic = {n: params[n].grad.copy() for n in NANO_SUBSET}
    return ("model.dat_nano_loss", f, point, analytic, 1e-4)


def gradient_suite(seed: int = 0, corrupt: str | None = None,
                   modules: list[str] | None = None) -> list[BlockResult]:
    """Run every gradient check. ``corrupt`` negates the analytic gradients of one module.

    Each parameter block appears exactly once in the returned list.
    """
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]
    cases = (_kernel_cases(rngs[0]) + _sampling_cases(rngs[1]) + _layer_cases(rngs[2])
             + [_nano_case(rngs[3])])
    results = []
    for module, f, point, analytic, tol in cases:
        if modules and not any(module == m or module.startswith(m + ".") for m in modules):
            continue
        if corrupt and (module == corrupt or module.startswith(corrupt + ".")):
            analytic = {k: -v for k, v in analytic.items()}
        zero = {k for k in point if k.endswith(ZERO_GRADIENT_SUFFIX)}
        rel = {k: v for k, v in point.items() if k not in zero}
        for block, (err, n, pair) in grad_check(f, rel, analytic, seed=seed).items():
            results.append(BlockResult(module, block, err, tol, n, pair))
        if zero:
            sub = {k: point[k] for k in zero}
            for block, (err, n, pair) in grad_check(f, sub, analytic, seed=seed, absolute=True).items():
                results.append(BlockResult(module, block, err, ZERO_GRADIENT_ATOL, n, pair, "abs"))
    return results


def main_report(seed=0, corrupt=None):
    t0 = time.time()
    res = gradient_suite(seed, corrupt)
    for r in res:
        print(r.line())
    print(f"# {sum(r.passed for r in res)}/{len(res)} blocks passed in {time.time() - t0:.1f}s")
    return res

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datpp.analysis.gradcheck import grad_check, randomize_params, weighted_sum
from datpp.blocks import mhsa_forward
from datpp.dmha import DmhaLayer, deform_rpb, deform_rpb_backward, dmha_backward, dmha_forward
from datpp.errors import ConfigError, DimensionError, NumericError, StateError
from datpp.sampling import distance_to_lattice, reference_grid


def make_layer(seed=0, c=8, m=2, g=2, r=2, k=3, size=(4, 4), use_rpb=True, scale=0.5, offsets=0.1):
    rng = np.random.default_rng(seed)
    layer = DmhaLayer(c, m, g, r, k, rng, table_size=size, use_rpb=use_rpb)
    randomize_params(layer, rng, scale)
    layer.offset_net.proj.weight.value[...] = rng.uniform(-offsets, offsets, layer.offset_net.proj.weight.shape)
    return layer, rng


def naive_mhsa(layer, x, heads):
    """Per-query loop over all keys, straight from the attention formula."""
    b, h, w, c = x.shape
    d = c // heads
    tok = x.reshape(b, h * w, c)
    q = tok @ layer.wq.weight.value + layer.wq.bias.value
    k = tok @ layer.wk.weight.value + layer.wk.bias.value
    v = tok @ layer.wv.weight.value + layer.wv.bias.value
    out = np.zeros_like(tok)
    for bi in range(b):
        for i in range(h * w):
            for m in range(heads):
                sl = slice(m * d, (m + 1) * d)
                s = np.array([q[bi, i, sl] @ k[bi, j, sl] / np.sqrt(d) for j in range(h * w)])
                a = np.exp(s - s.max())
                a /= a.sum()
                out[bi, i, sl] = sum(a[j] * v[bi, j, sl] for j in range(h * w))
    y = out @ layer.wo.weight.value + layer.wo.bias.value
    return y.reshape(b, h, w, c)


def test_r1_zero_offsets_no_rpb_equals_mhsa():
    rng = np.random.default_rng(0)
    layer = DmhaLayer(8, 2, 1, 1, 1, rng, use_rpb=False)
    randomize_params(layer, rng)
    layer.offset_net.proj.weight.value[...] = 0.0
    x = rng.standard_normal((2, 4, 4, 8))
    y, _ = dmha_forward(layer, x)
    assert np.max(np.abs(y - mhsa_forward(layer, x, 2))) < 1e-10
    assert np.max(np.abs(y - naive_mhsa(layer, x, 2))) < 1e-10


def test_mhsa_matches_naive_loop():
    layer, rng = make_layer(1)
    x = rng.standard_normal((1, 3, 4, 8))
    assert np.max(np.abs(mhsa_forward(layer, x, 2) - naive_mhsa(layer, x, 2))) <= 1e-12


def _inside_lattice_hull(grid, h, w):
    from datpp.sampling import denormalize
    px, py = denormalize(grid[..., 0], w), denormalize(grid[..., 1], h)
    return np.all((px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_constant_input_gives_constant_output(seed, c):
    # any offsets that keep samples inside the lattice hull, random bias tables
    layer, rng = make_layer(seed, offsets=0.1)
    layer.rpb_table.value[...] = rng.uniform(-1, 1, layer.rpb_table.shape)
    x = np.full((1, 4, 4, 8), c)
    y, trace = dmha_forward(layer, x, want_trace=True)
    assert _inside_lattice_hull(trace.sample_grid, 4, 4)
    assert np.max(np.abs(y - y[:, :1, :1])) <= 1e-10


def test_constant_input_outside_hull_sees_zero_padding():
    # samples pushed past the outer pixel centers mix in zero padding
    layer, rng = make_layer(0, offsets=0.5)
    x = np.full((1, 4, 4, 8), 1.0)
    _, trace = dmha_forward(layer, x, want_trace=True)
    assert not _inside_lattice_hull(trace.sample_grid, 4, 4)
    assert trace.sampled_features.min() < 1.0 - 1e-6


def test_shapes_and_trace():
    layer, rng = make_layer(2, c=16, m=4, g=2, r=2, size=(8, 8))
    x = rng.standard_normal((2, 8, 8, 16))
    y, trace = dmha_forward(layer, x, want_trace=True)
    assert y.shape == (2, 8, 8, 16)
    assert trace.attention.shape == (2, 4, 64, 16)
    assert trace.sample_grid.shape == (2, 2, 4, 4, 2)
    assert trace.sampled_features.shape == (2, 4, 4, 16)
    assert trace.num_samples == 16
    assert np.max(np.abs(trace.attention.sum(-1) - 1)) <= 1e-10
    assert np.all((trace.attention >= 0) & (trace.attention <= 1))
    assert np.all(np.abs(trace.sample_grid) <= 1)


def test_no_trace_unless_requested():
    layer, rng = make_layer(3)
    _, trace = dmha_forward(layer, rng.standard_normal((1, 4, 4, 8)))
    assert trace is None


def test_zero_offsets_sample_at_reference_points():
    layer, rng = make_layer(4)
    layer.offset_net.proj.weight.value[...] = 0.0
    _, trace = dmha_forward(layer, rng.standard_normal((1, 4, 4, 8)), want_trace=True)
    ref = reference_grid(2, 2)
    for g in range(2):
        assert np.array_equal(trace.sample_grid[0, g], ref)


def test_heads_of_a_group_share_displacements():
    """Heads in one group see one key set: with a table identical across heads, biases coincide."""
    layer, rng = make_layer(5, c=16, m=4, g=2, size=(4, 4), offsets=0.3)
    shared = rng.uniform(-1, 1, layer.rpb_table.shape[1:])
    layer.rpb_table.value[...] = shared
    _, trace = dmha_forward(layer, rng.standard_normal((1, 4, 4, 16)), want_trace=True)
    keys = trace.sample_grid
    q = reference_grid(4, 4)
    b0 = deform_rpb(layer.rpb_table.value, q, keys, head=0, group_of_head=0)
    b1 = deform_rpb(layer.rpb_table.value, q, keys, head=1, group_of_head=0)
    b2 = deform_rpb(layer.rpb_table.value, q, keys, head=2, group_of_head=1)
    assert np.array_equal(b0, b1)
    assert not np.allclose(b0, b2)


def test_rpb_zero_table_and_coincident_points():
    q = reference_grid(4, 4)
    keys = q.reshape(1, 4, 4, 2)
    assert not deform_rpb(np.zeros((2, 7, 7)), q, keys, 0).any()
    table = np.random.default_rng(6).standard_normal((1, 7, 7))
    bias = deform_rpb(table, q, keys, 0)
    # identical query and key: displacement 0 lands on the table's center cell
    assert np.allclose(np.diag(bias[0]), table[0, 3, 3])


def test_rpb_displacement_gradient():
    rng = np.random.default_rng(7)
    table = rng.uniform(-1, 1, (2, 7, 7))
    q = reference_grid(4, 4)
    while True:
        keys = rng.uniform(-0.9, 0.9, (1, 2, 3, 2))
        disp = (q.reshape(-1, 1, 2)[None] - keys.reshape(1, 1, -1, 2)) * 0.5
        if distance_to_lattice(disp, 7, 7) >= 1e-3:
            break
    wt = rng.uniform(-1, 1, (1, 16, 6))
    gt, gk = deform_rpb_backward(table, q, keys, 1, wt)
    res = grad_check(lambda: weighted_sum(deform_rpb(table, q, keys, 1), wt),
                     {"keys": keys}, {"keys": gk})
    assert res["keys"][0] <= 1e-5


def _layer_gradients(layer, x, wt):
    layer.zero_grad()
    _, trace = dmha_forward(layer, x, want_trace=True)
    gx = dmha_backward(layer, trace, wt)
    return gx


def test_full_gradient_check():
    # 1x4x4x8, M=2, G=2, r=2 instance away from lattice lines
    for seed in range(100):
        layer, rng = make_layer(seed)
        x = rng.uniform(-1, 1, (1, 4, 4, 8))
        _, trace = dmha_forward(layer, x, want_trace=True)
        keys = trace.key_locations()
        disp = (reference_grid(4, 4).reshape(-1, 1, 2)[None, None] - keys[:, :, None]) * 0.5
        if (distance_to_lattice(trace.sample_grid, 4, 4) >= 1e-3
                and distance_to_lattice(disp, 7, 7) >= 1e-3 and np.all(np.abs(trace.sample_grid) < 0.999)):
            break
    wt = rng.uniform(-1, 1, (1, 4, 4, 8))
    gx = _layer_gradients(layer, x, wt)
    point = {"x": x} | {n: p.value for n, p in layer.named_params()}
    analytic = {"x": gx} | {n: p.grad.copy() for n, p in layer.named_params()}
    zero = [n for n in point if n.endswith("wk.bias")]
    f = lambda: weighted_sum(dmha_forward(layer, x)[0], wt)  # noqa: E731
    res = grad_check(f, {n: v for n, v in point.items() if n not in zero}, analytic)
    for name, (err, _, pair) in res.items():
        assert err <= 1e-4, (name, err, pair)
    # key bias: softmax shift invariance makes the exact gradient zero
    res = grad_check(f, {n: point[n] for n in zero}, analytic, absolute=True)
    for name, (err, _, pair) in res.items():
        assert np.max(np.abs(analytic[name])) <= 1e-12
        assert err <= 1e-7


def test_zero_grad_out_gives_zero_gradients():
    layer, rng = make_layer(8)
    gx = _layer_gradients(layer, rng.standard_normal((1, 4, 4, 8)), np.zeros((1, 4, 4, 8)))
    assert not gx.any()
    assert all(not p.grad.any() for p in layer.params())


def test_offset_projection_gradient_nonzero_at_zero_init():
    layer, rng = make_layer(9)
    layer.offset_net.proj.weight.value[...] = 0.0
    layer.rpb_table.value[...] = rng.uniform(-1, 1, layer.rpb_table.shape)
    _layer_gradients(layer, rng.standard_normal((1, 4, 4, 8)), rng.standard_normal((1, 4, 4, 8)))
    assert np.abs(layer.offset_net.proj.weight.grad).max() > 1e-6


def test_backward_needs_trace():
    layer, _ = make_layer(10)
    with pytest.raises(StateError):
        dmha_backward(layer, None, np.zeros((1, 4, 4, 8)))


def test_config_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        DmhaLayer(10, 4, 2, 2, 3, rng, table_size=(4, 4))  # C not divisible by M
    with pytest.raises(ConfigError):
        DmhaLayer(8, 2, 4, 2, 3, rng, table_size=(4, 4))  # M not divisible by G
    layer, _ = make_layer(11)
    with pytest.raises(ConfigError):
        dmha_forward(layer, np.zeros((1, 5, 4, 8)))
    with pytest.raises(DimensionError):
        dmha_forward(layer, np.zeros((1, 4, 4, 6)))


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_non_finite_input_names_the_step():
    layer, _ = make_layer(12)
    x = np.zeros((1, 4, 4, 8))
    x[0, 0, 0, 0] = np.inf
    with pytest.raises(NumericError, match="offsets|sampling|attention|output"):
        dmha_forward(layer, x)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datpp.analysis.gradcheck import weighted_sum, randomize_params, grad_check
from datpp.errors import ConfigError, StateError
from datpp.offsetnet import OffsetNetwork, generate_offsets


def test_fresh_network_predicts_zero_offsets():
    rng = np.random.default_rng(0)
    net = OffsetNetwork(4, 5, 4, rng)
    q = rng.standard_normal((1, 8, 8, 8))
    off = generate_offsets(net, q, 2)
    assert off.shape == (1, 2, 2, 2, 2)
    assert np.array_equal(off, np.zeros_like(off))


def test_projection_has_no_bias():
    net = OffsetNetwork(4, 3, 2, np.random.default_rng(0))
    names = dict(net.named_params())
    assert "proj.weight" in names and "proj.bias" not in names
    assert names["proj.weight"].shape == (1, 1, 4, 2)
    assert names["dw.weight"].shape == (3, 3, 1, 4)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([(1, 1), (2, 3), (4, 5), (8, 9), (2, 2 + 1)]), st.integers(1, 3), st.integers(0, 1000))
def test_shape_contract(rk, mult, seed):
    r, k = rk
    rng = np.random.default_rng(seed)
    net = OffsetNetwork(2, k, r, rng)
    h = w = r * mult
    off = generate_offsets(net, rng.standard_normal((2, h, w, 4)), 2)
    assert off.shape == (2, 2, h // r, w // r, 2)


def test_group_swap_swaps_outputs():
    rng = np.random.default_rng(1)
    net = OffsetNetwork(4, 3, 2, rng)
    randomize_params(net, rng)
    q = rng.standard_normal((1, 4, 4, 8))
    swapped = np.concatenate([q[..., 4:], q[..., :4]], axis=-1)
    a = generate_offsets(net, q, 2)
    b = generate_offsets(net, swapped, 2)
    assert np.array_equal(a[:, 0], b[:, 1]) and np.array_equal(a[:, 1], b[:, 0])


def test_config_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        OffsetNetwork(4, 1, 2, rng)  # kernel smaller than stride
    net = OffsetNetwork(4, 3, 2, rng)
    with pytest.raises(ConfigError):
        net.forward(np.zeros((1, 4, 4, 6)), 4)  # 6 channels, 4 groups
    with pytest.raises(ConfigError):
        net.forward(np.zeros((1, 5, 4, 8)), 2)  # 5 not divisible by stride


def test_backward_without_cache():
    with pytest.raises(StateError):
        OffsetNetwork(4, 3, 2, np.random.default_rng(0)).backward(None, np.zeros((1, 2, 2, 2, 2)))


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    net = OffsetNetwork(4, 3, 2, rng)
    randomize_params(net, rng)
    q = rng.uniform(-1, 1, (2, 4, 4, 8))
    wt = rng.uniform(-1, 1, (2, 2, 2, 2, 2))
    net.zero_grad()
    _, cache = net.forward(q, 2)
    gq = net.backward(cache, wt)
    point = {"q": q} | {n: p.value for n, p in net.named_params()}
    analytic = {"q": gq} | {n: p.grad.copy() for n, p in net.named_params()}
    res = grad_check(lambda: weighted_sum(net.forward(q, 2)[0], wt), point, analytic)
    for name, (err, _, pair) in res.items():
        assert err <= 1e-5, (name, err, pair)

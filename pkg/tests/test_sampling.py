import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from datpp.sampling import (bilinear_sample, bilinear_sample_backward, clip_backward, clip_locations,
                            denormalize, distance_to_lattice, normalize, reference_grid)


def test_reference_grid_examples():
    assert np.array_equal(reference_grid(1, 1), np.zeros((1, 1, 2)))
    g2 = reference_grid(2, 2)
    assert set(g2[..., 0].ravel()) == {-0.5, 0.5}
    assert np.isclose(reference_grid(7, 7)[0, 0, 0], -6 / 7)


def test_reference_grid_axis_order():
    g = reference_grid(2, 3)
    assert g.shape == (2, 3, 2)
    # x varies along width, y along height
    assert np.all(np.diff(g[0, :, 0]) > 0) and np.all(g[0, :, 1] == g[0, 0, 1])
    assert np.all(np.diff(g[:, 0, 1]) > 0)


@given(st.integers(1, 40), st.integers(1, 40))
def test_reference_grid_strictly_inside(h, w):
    g = reference_grid(h, w)
    assert np.all(np.abs(g) < 1)


def test_denormalize_examples():
    assert denormalize(-1.0, 8) == -0.5
    assert denormalize(0.0, 8) == 3.5
    assert np.isclose(denormalize(reference_grid(7, 7)[0, 0, 0], 14), 0.5)


@given(st.integers(1, 6), st.integers(1, 12))
def test_reference_points_land_on_cell_centers(r, n):
    size = r * n
    px = denormalize(reference_grid(n, n)[0, :, 0], size)
    assert np.allclose(px, r * np.arange(n) + (r - 1) / 2, atol=1e-12)


@given(st.floats(-1, 1), st.integers(1, 100))
def test_normalize_inverts_denormalize(u, n):
    assert np.isclose(normalize(denormalize(u, n), n), u, atol=1e-12)


def test_clip():
    assert clip_locations(np.array(1.7)) == 1.0
    assert clip_locations(np.array(-0.3)) == -0.3
    loc = np.array([1.7, -0.3, -2.0, 1.0])
    assert np.array_equal(clip_backward(loc, np.ones(4)), [0.0, 1.0, 0.0, 1.0])


def test_sample_at_lattice_site_is_exact():
    z = np.random.default_rng(0).standard_normal((1, 5, 6, 3))
    iy, ix = 3, 2
    grid = np.array([[[normalize(ix, 6), normalize(iy, 5)]]])
    assert np.array_equal(bilinear_sample(z, grid)[0, 0], z[0, iy, ix])


def test_sample_all_lattice_sites_bit_exact():
    # power-of-two sizes make the round trip through normalized coordinates exact
    z = np.random.default_rng(1).standard_normal((2, 4, 8, 2))
    grid = np.broadcast_to(reference_grid(4, 8), (2, 4, 8, 2))
    assert np.array_equal(denormalize(grid[0, 0, :, 0], 8), np.arange(8.0))
    assert np.array_equal(bilinear_sample(z, grid), z)


def test_sample_lattice_sites_any_size_to_roundoff():
    z = np.random.default_rng(1).standard_normal((1, 5, 7, 2))
    grid = reference_grid(5, 7)[None]
    assert np.max(np.abs(bilinear_sample(z, grid) - z)) <= 1e-14


def test_sample_center_of_two_by_two():
    z = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 2, 2, 1)
    assert bilinear_sample(z, np.zeros((1, 1, 2)))[0, 0, 0] == 1.5


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.floats(-5, 5), st.integers(0, 2 ** 31))
def test_partition_of_unity(h, w, c, seed):
    rng = np.random.default_rng(seed)
    z = np.full((1, h, w, 2), c)
    # interior points: pixel coordinates in [0, n-1]
    px = rng.uniform(0, w - 1, (10,))
    py = rng.uniform(0, h - 1, (10,))
    grid = np.stack([normalize(px, w), normalize(py, h)], axis=-1)[None]
    out = bilinear_sample(z, grid)
    assert np.max(np.abs(out - c)) <= 1e-12


def test_zero_padding_outside_the_map():
    z = np.ones((1, 4, 4, 1))
    # u = -1 is half a pixel outside: only half the weight lands on the map per axis
    out = bilinear_sample(z, np.array([[[-1.0, -1.0]]]))
    assert np.isclose(out[0, 0, 0], 0.25)


def _num_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        fp = f()
        flat[i] = o - h
        fm = f()
        flat[i] = o
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def test_coordinate_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    z = rng.uniform(-1, 1, (2, 5, 6, 3))
    while True:
        grid = rng.uniform(-0.95, 0.95, (2, 3, 4, 2))
        if distance_to_lattice(grid, 5, 6) >= 1e-3:
            break
    wt = rng.uniform(-1, 1, (2, 3, 4, 3))
    gz, gg = bilinear_sample_backward(z, grid, wt)
    num_g = _num_grad(lambda: float((bilinear_sample(z, grid) * wt).sum()), grid)
    num_z = _num_grad(lambda: float((bilinear_sample(z, grid) * wt).sum()), z)
    rel = np.abs(gg - num_g) / np.maximum(np.maximum(np.abs(gg), np.abs(num_g)), 1e-8)
    assert rel.max() <= 1e-5
    assert np.max(np.abs(gz - num_z)) <= 1e-8


def test_distance_to_lattice():
    grid = np.array([[[normalize(2.0, 6), normalize(1.25, 5)]]])
    assert np.isclose(distance_to_lattice(grid, 5, 6), 0.0, atol=1e-12)
    grid = np.array([[[normalize(2.5, 6), normalize(1.25, 5)]]])
    assert np.isclose(distance_to_lattice(grid, 5, 6), 0.25)


def test_shape_errors():
    from datpp.errors import DimensionError
    with pytest.raises(DimensionError):
        bilinear_sample(np.zeros((2, 4, 4, 1)), np.zeros((1, 3, 2)))

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepvoxels.autodiff import Tensor, finite_diff_check
from deepvoxels.voxel_grid import (VoxelGrid, bilinear_sample, interp_weights, place_grid, trilinear_sample,
                                   voxel_center)

from oracles import brute_bilinear, brute_trilinear


def test_empty_grid_and_voxel_size():
    g = VoxelGrid.empty(np.zeros(3), 2.0, 4, 3)
    assert g.features.shape == (3, 4, 4, 4)
    np.testing.assert_allclose(g.voxel_size, 0.5)
    with pytest.raises(ValueError):
        VoxelGrid.empty(np.zeros(3), -1.0, 4, 3)


def test_voxel_center_and_world_to_grid():
    g = VoxelGrid.empty(np.array([-1.0, -1.0, -1.0]), 2.0, 4, 1)
    c = voxel_center(g, 0, 1, 3)
    np.testing.assert_allclose(c, [-0.75, -0.25, 0.75])
    np.testing.assert_allclose(g.world_to_grid(c), [0, 1, 3], atol=1e-12)
    np.testing.assert_allclose(g.voxel_centers()[0, 1, 3], c)
    with pytest.raises(IndexError):
        voxel_center(g, 4, 0, 0)


def test_place_grid_contains_points():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(100, 3)) * [1.0, 0.2, 0.5] + [3.0, -1.0, 0.0]
    origin, side = place_grid(pts)
    assert np.all(pts >= origin) and np.all(pts <= origin + side)


def test_place_grid_symmetric_set_and_degenerate():
    corners = np.array(list(itertools.product((-0.5, 0.5), repeat=3)))
    origin, side = place_grid(corners, margin=1.1)
    assert side == pytest.approx(1.1)
    np.testing.assert_allclose(origin, -0.55)
    origin, side = place_grid(np.ones((5, 3)))
    assert side == 1.0
    with pytest.raises(ValueError):
        place_grid(np.zeros((0, 3)))


def test_trilinear_at_centres_and_midpoint():
    rng = np.random.default_rng(1)
    vol = rng.normal(size=(2, 3, 3, 3))
    t = Tensor(vol)
    np.testing.assert_allclose(trilinear_sample(t, [1.0, 2.0, 0.0]).data, vol[:, 1, 2, 0], atol=1e-12)
    mid = trilinear_sample(t, [0.5, 0.5, 0.5]).data
    np.testing.assert_allclose(mid, vol[:, :2, :2, :2].mean(axis=(1, 2, 3)), atol=1e-12)


def test_trilinear_matches_brute_force():
    rng = np.random.default_rng(2)
    vol = rng.normal(size=(2, 4, 3, 5))
    pts = rng.uniform(-1.2, 5.2, size=(200, 3))
    got = trilinear_sample(Tensor(vol), pts).data
    want = np.stack([brute_trilinear(vol, p) for p in pts], axis=1)
    np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)


def test_bilinear_matches_brute_force():
    rng = np.random.default_rng(3)
    img = rng.normal(size=(3, 5, 7))
    pts = rng.uniform(-1.5, 7.5, size=(300, 2))
    got = bilinear_sample(Tensor(img), pts).data
    want = np.stack([brute_bilinear(img, x, y) for x, y in pts], axis=1)
    np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)
    np.testing.assert_allclose(bilinear_sample(Tensor(img), [2.0, 3.0]).data, img[:, 3, 2])


@settings(max_examples=60, deadline=None)
@given(st.tuples(st.floats(0, 3), st.floats(0, 3), st.floats(0, 3)))
def test_interp_weights_partition_of_unity_inside(p):
    idx, w = interp_weights(np.array([p]), (4, 4, 4))
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all(w >= 0)


def test_interp_weights_far_outside_and_nan():
    idx, w = interp_weights(np.array([[10.0, 0.0, 0.0], [np.nan, 0.0, 0.0]]), (4, 4, 4))
    assert not w.any()


def test_sampling_gradients():
    rng = np.random.default_rng(4)
    vol = Tensor(rng.normal(size=(2, 3, 3, 3)))
    pts = rng.uniform(-0.5, 2.5, size=(5, 3))
    r = Tensor(rng.normal(size=(2, 5)))
    assert finite_diff_check(lambda v: (trilinear_sample(v, pts) * r).sum(), [vol]) < 1e-5


def test_place_grid_unit_cube_and_small_grid_centre():
    corners = np.array(list(itertools.product((0.0, 1.0), repeat=3)))
    origin, side = place_grid(corners)
    np.testing.assert_allclose(origin + side / 2, 0.5)
    assert side == pytest.approx(1.1)
    g = VoxelGrid.empty(np.zeros(3), 1.0, 2, 1)
    np.testing.assert_allclose(voxel_center(g, 0, 0, 0), [0.25, 0.25, 0.25])

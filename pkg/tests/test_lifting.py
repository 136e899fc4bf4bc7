import numpy as np
import pytest

from deepvoxels.autodiff import Tensor, finite_diff_check
from deepvoxels.camera import intrinsics, look_at, project_points
from deepvoxels.lifting import (GRU, Inpainter, LiftOperator, feature_to_image_coords, gru_step,
                                image_to_feature_coords, integrate_observation, lift)
from deepvoxels.voxel_grid import VoxelGrid, bilinear_sample

from oracles import frustum_membership


def make_grid(res=6, channels=2):
    return VoxelGrid.empty(np.full(3, -0.5), 1.0, res, channels)


def test_coordinate_maps_are_inverse_and_centre_aligned():
    u = np.linspace(-0.5, 63.5, 17)
    f = image_to_feature_coords(u, 64, 32)
    np.testing.assert_allclose(feature_to_image_coords(f, 64, 32), u)
    # the image's outer edge maps to the feature map's outer edge
    assert image_to_feature_coords(-0.5, 64, 32) == -0.5
    assert image_to_feature_coords(63.5, 64, 32) == 31.5


def test_frustum_membership_matches_projection_oracle():
    grid = make_grid(8)
    pose = look_at([1.2, 0.4, 0.3], [0.1, 0.0, 0.0], intrinsics(14.0, 16, 16))
    op = LiftOperator(pose, grid, 16, 8)
    expect = frustum_membership(grid, pose, 16, 8)
    assert 0 < expect.sum() < expect.size
    np.testing.assert_array_equal(op.valid, expect)


def test_lift_values_are_bilinear_samples():
    rng = np.random.default_rng(0)
    grid = make_grid(5, 3)
    pose = look_at([2.0, 0.5, 0.8], [0.0, 0.0, 0.0], intrinsics(20.0, 16, 16))
    fmap = Tensor(rng.normal(size=(3, 8, 8)))
    out = lift(fmap, pose, grid, 16).data
    op = LiftOperator(pose, grid, 16, 8)
    uvd, _ = project_points(pose, grid.voxel_centers())
    f = image_to_feature_coords(uvd[..., :2], 16, 8)
    for idx in np.ndindex(*grid.res):
        want = bilinear_sample(fmap, f[idx]).data if op.valid[idx] else np.zeros(3)
        np.testing.assert_allclose(out[(slice(None),) + idx], want, atol=1e-12)


def test_voxels_behind_camera_get_zero():
    grid = make_grid(4)
    pose = look_at([0.0, 0.0, 0.2], [0.0, 0.0, 1.0], intrinsics(2.0, 8, 8))  # looks away from most voxels
    op = LiftOperator(pose, grid, 8, 8)
    uvd, _ = project_points(pose, grid.voxel_centers())
    assert not np.any(op.valid[uvd[..., 2] <= 0])
    out = op(Tensor(np.ones((2, 8, 8)))).data
    assert not np.any(out[:, ~op.valid])


def test_lift_gradient():
    rng = np.random.default_rng(1)
    grid = make_grid(4)
    pose = look_at([1.5, 0.5, 0.5], [0.0, 0.0, 0.0], intrinsics(8.0, 8, 8))
    fmap = Tensor(rng.normal(size=(2, 4, 4)))
    r = Tensor(rng.normal(size=(2, 4, 4, 4)))
    assert finite_diff_check(lambda m: (lift(m, pose, grid, 8) * r).sum(), [fmap]) < 1e-5


def test_lift_shape_mismatch():
    grid = make_grid(4)
    pose = look_at([1.5, 0.5, 0.5], [0.0, 0.0, 0.0], intrinsics(8.0, 8, 8))
    op = LiftOperator(pose, grid, 8, 4)
    with pytest.raises(ValueError):
        op(Tensor(np.zeros((2, 5, 5))))


# -- GRU -----------------------------------------------------------------------

def gate_forced_gru(channels, z_bias, rng):
    gru = GRU(channels, rng)
    gru.params["Wz.w"].data[...] = 0.0
    gru.params["Uz.w"].data[...] = 0.0
    gru.params["Bz"].data[...] = z_bias
    return gru


@pytest.mark.parametrize("seed", range(3))
def test_gru_forced_gates(seed):
    rng = np.random.default_rng(seed)
    h, x = Tensor(rng.normal(size=(3, 4, 4, 4))), Tensor(rng.normal(size=(3, 4, 4, 4)))
    keep = gate_forced_gru(3, -1e3, rng)
    np.testing.assert_allclose(keep.step(h, x).data, h.data, atol=1e-9)
    take = gate_forced_gru(3, 1e3, rng)
    new, z, r, s = take.step(h, x, return_gates=True)
    np.testing.assert_allclose(new.data, s.data, atol=1e-9)


def test_gru_convex_combination_bound():
    rng = np.random.default_rng(7)
    gru = GRU(2, rng)
    for _ in range(20):
        h = Tensor(rng.normal(size=(2, 3, 3, 3)) * 3)
        x = Tensor(rng.normal(size=(2, 3, 3, 3)) * 3)
        new, z, r, s = gru.step(h, x, return_gates=True)
        lo = np.minimum(h.data, s.data) - 1e-12
        hi = np.maximum(h.data, s.data) + 1e-12
        assert np.all((new.data >= lo) & (new.data <= hi))
        assert np.all((z.data >= 0) & (z.data <= 1) & (r.data >= 0) & (r.data <= 1))
        assert np.all(s.data >= 0)


def test_gru_zero_input_zero_state_gives_relu_bias():
    rng = np.random.default_rng(0)
    gru = GRU(2, rng)
    gru.params["Bs"].data[...] = [-1.0, 2.0]
    zero = Tensor(np.zeros((2, 3, 3, 3)))
    new, z, _, s = gru.step(zero, zero, return_gates=True)
    np.testing.assert_allclose(s.data[0], 0.0)
    np.testing.assert_allclose(s.data[1], 2.0)
    np.testing.assert_allclose(new.data, z.data * s.data)


def test_gru_shape_mismatch_and_even_kernel():
    gru = GRU(2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        gru_step(Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros((2, 4, 3, 3))), gru)
    with pytest.raises(ValueError):
        GRU(2, np.random.default_rng(0), kernel=2)


def test_gru_gradients():
    rng = np.random.default_rng(3)
    gru = GRU(2, rng)
    h, x = Tensor(rng.normal(size=(2, 3, 3, 3))), Tensor(rng.normal(size=(2, 3, 3, 3)))
    r = Tensor(rng.normal(size=(2, 3, 3, 3)))
    inputs = [h, x] + list(gru.params.values())
    assert finite_diff_check(lambda *_: (gru.step(h, x) * r).sum(), inputs) < 1e-3


def test_integrate_observation_persists_detached_state():
    rng = np.random.default_rng(5)
    grid = make_grid(4)
    pose = look_at([1.5, 0.5, 0.5], [0.0, 0.0, 0.0], intrinsics(8.0, 8, 8))
    gru = GRU(2, rng)
    fmap = Tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
    h = integrate_observation(grid, fmap, pose, gru, image_size=8)
    assert h.requires_grad
    assert not grid.features.requires_grad
    np.testing.assert_array_equal(grid.features.data, h.data)
    h2 = integrate_observation(grid, fmap, pose, gru, image_size=8)
    assert not np.array_equal(h2.data, h.data)  # state carried forward


def test_inpainter_preserves_shape():
    net = Inpainter(3, 1, np.random.default_rng(0))
    assert net(Tensor(np.zeros((3, 4, 4, 4)))).shape == (3, 4, 4, 4)
    with pytest.raises(ValueError):
        net(Tensor(np.zeros((3, 5, 4, 4))))


def test_constant_feature_map_fills_frustum():
    grid = make_grid(6)
    pose = look_at([1.2, 0.4, 0.3], [0.1, 0.0, 0.0], intrinsics(14.0, 16, 16))
    out = lift(Tensor(np.full((2, 8, 8), 0.7)), pose, grid, 16).data
    inside = frustum_membership(grid, pose, 16, 8)
    np.testing.assert_allclose(out[:, inside], 0.7, atol=1e-12)
    assert not out[:, ~inside].any()


def test_grid_behind_camera_lifts_to_zero():
    grid = make_grid(4)
    pose = look_at([0.0, 0.0, 2.0], [0.0, 0.0, 5.0], intrinsics(8.0, 8, 8), up=(0.0, 1.0, 0.0))
    assert not lift(Tensor(np.ones((2, 8, 8))), pose, grid, 8).data.any()


def test_single_voxel_at_principal_point():
    rng = np.random.default_rng(2)
    grid = VoxelGrid.empty(np.full(3, -0.5), 1.0, 1, 3)
    pose = look_at([2.0, 1.0, 0.7], [0.0, 0.0, 0.0], intrinsics(20.0, 16, 16))
    fmap = Tensor(rng.normal(size=(3, 8, 8)))
    f = image_to_feature_coords(np.array([7.5, 7.5]), 16, 8)
    np.testing.assert_allclose(lift(fmap, pose, grid, 16).data[:, 0, 0, 0], bilinear_sample(fmap, f).data,
                               atol=1e-12)


def zero_gru(channels=2):
    gru = GRU(channels, np.random.default_rng(0))
    for p in gru.params.values():
        p.data[...] = 0.0
    return gru


def test_gru_all_zero_params_halves_state():
    rng = np.random.default_rng(1)
    h, x = Tensor(rng.normal(size=(2, 4, 4, 4))), Tensor(rng.normal(size=(2, 4, 4, 4)))
    new, z, r, s = zero_gru().step(h, x, return_gates=True)
    np.testing.assert_allclose(z.data, 0.5)
    np.testing.assert_allclose(r.data, 0.5)
    np.testing.assert_allclose(s.data, 0.0)
    np.testing.assert_allclose(new.data, 0.5 * h.data)


def test_integration_of_zero_observation_halves_state_each_step():
    grid = make_grid(4)
    start = np.random.default_rng(2).normal(size=grid.features.shape)
    grid.features = Tensor(start.copy())
    pose = look_at([1.5, 0.5, 0.5], [0.0, 0.0, 0.0], intrinsics(8.0, 8, 8))
    gru = zero_gru()
    for step in range(1, 4):
        integrate_observation(grid, Tensor(np.zeros((2, 8, 8))), pose, gru, image_size=8)
        np.testing.assert_allclose(grid.features.data, start * 0.5 ** step)
        assert grid.features.shape == start.shape


def test_open_gate_integration_contracts():
    rng = np.random.default_rng(3)
    grid = make_grid(4)
    pose = look_at([1.5, 0.5, 0.5], [0.0, 0.0, 0.0], intrinsics(8.0, 8, 8))
    gru = GRU(2, rng)
    gru.params["Bz"].data[...] = 50.0  # Z ~ 1
    gru.params["Us.w"].data *= 0.1
    fmap = Tensor(rng.normal(size=(2, 8, 8)))
    states = [grid.features.data.copy()]
    for _ in range(2):
        integrate_observation(grid, fmap, pose, gru, image_size=8)
        states.append(grid.features.data.copy())
    assert np.linalg.norm(states[2] - states[1]) <= np.linalg.norm(states[1] - states[0])


@pytest.mark.parametrize("res", [8, 16, 32])
def test_inpainter_shapes_and_zero_weights(res):
    net = Inpainter(2, 1, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).normal(size=(2, res, res, res)))
    assert net(x).shape == x.shape
    net.zero_()
    assert not net(x).data.any()


def test_inpainter_gradient():
    rng = np.random.default_rng(4)
    net = Inpainter(2, 1, rng)
    for p in net.params.values():
        if p.ndim == 1:
            p.data = 0.1 * rng.normal(size=p.shape)  # keep ReLUs off the kink
    h = Tensor(rng.normal(size=(2, 4, 4, 4)))
    r = Tensor(rng.normal(size=(2, 4, 4, 4)))
    assert finite_diff_check(lambda v: (net(v) * r).sum(), [h], eps=1e-5, atol=1e-8) < 1e-3

"""
Pinhole cameras and the voxel grid
===================================

Cameras map world points to pixels plus a depth. The voxel grid stores one
feature vector per cell and is read back with trilinear interpolation.
"""

import numpy as np

from deepvoxels.camera import intrinsics, look_at, project, unproject
from deepvoxels.voxel_grid import VoxelGrid, place_grid, trilinear_sample

# A 64x64 camera two units away, looking at the origin with +z up.
K = intrinsics(focal=70.0, width=64, height=64)
pose = look_at(center=[2.0, 0.0, 0.5], target=[0.0, 0.0, 0.0], K=K)
print("camera centre", pose.center, "optical axis", np.round(pose.optical_axis, 3))

# The target lands on the principal point, at the distance along the optical axis.
s = project(pose, [0.0, 0.0, 0.0])
print(f"origin projects to u={s.u:.2f}, v={s.v:.2f}, depth={s.d:.3f}")

# Unprojecting (u, v, depth) gives the world point back.
x = np.array([0.1, -0.2, 0.3])
print("round trip error", np.abs(unproject(pose, project(pose, x)) - x).max())

# A cube-shaped grid fitted around some points, with random features.
pts = np.random.default_rng(0).uniform(-0.4, 0.4, size=(50, 3))
origin, side = place_grid(pts)
grid = VoxelGrid.empty(origin, side, res=8, channels=2)
print(f"grid origin {np.round(origin, 3)}, side {side:.3f}, voxel size {grid.voxel_size[0]:.3f}")

# Reading at a voxel centre returns that voxel; halfway between two averages them.
grid.features.data[...] = np.random.default_rng(1).normal(size=grid.features.shape)
print("at voxel (1,2,3):", trilinear_sample(grid.features, [1, 2, 3]).data, grid.features.data[:, 1, 2, 3])
print("between (1,2,3) and (2,2,3):", trilinear_sample(grid.features, [1.5, 2, 3]).data)

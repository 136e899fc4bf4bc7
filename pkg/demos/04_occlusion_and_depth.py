"""
Seeing the grid from a camera: visibility and depth
====================================================

The grid is resampled into the target camera's frustum as a stack of depth
slices. A small network scores each slice per pixel; a softmax along the ray
turns scores into visibility weights, which both collapse the stack into a 2D
feature map and give an expected depth.
"""

import numpy as np

from deepvoxels.autodiff import Tensor
from deepvoxels.camera import intrinsics, look_at
from deepvoxels.projection import (OcclusionNet, build_view_volume, depth_from_weights, depth_range,
                                   flatten_weighted, occlusion_visibility, uniform_visibility)
from deepvoxels.voxel_grid import VoxelGrid

rng = np.random.default_rng(0)
grid = VoxelGrid.empty(np.full(3, -0.5), 1.0, res=8, channels=4)
grid.features = Tensor(rng.normal(size=grid.features.shape))
pose = look_at([1.5, 1.0, 1.2], [0.0, 0.0, 0.0], intrinsics(40.0, 32, 32))

near, far = depth_range(grid, pose)
print(f"the grid spans depths {near:.3f} .. {far:.3f} from this camera")

vol = build_view_volume(grid, pose, size=16, samples=8, image_size=32)
print("view volume [channels, rows, cols, depth slices]:", vol.features.shape)

vis = occlusion_visibility(vol, OcclusionNet(4, 4, 1, rng))
print("weights sum to one along every ray:", np.allclose(vis.array.sum(axis=-1), 1.0))
depth = depth_from_weights(vis, vol).data
print(f"expected depth in [{depth.min():.3f}, {depth.max():.3f}], inside [near, far]")

# The ablation replaces learned visibility with a plain average over depth.
flat_learned = flatten_weighted(vol, vis).data
flat_uniform = flatten_weighted(vol, uniform_visibility(vol)).data
print("learned vs uniform flattening differ by", np.abs(flat_learned - flat_uniform).mean())

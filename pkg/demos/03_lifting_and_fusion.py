"""
Lifting image features into the grid and fusing them
=====================================================

Each voxel centre is projected into the source view and reads the 2D feature
map there. A convolutional GRU then folds that observation into the
persistent grid state, which survives from one training step to the next.
"""

import numpy as np

from deepvoxels.autodiff import Tensor
from deepvoxels.camera import intrinsics, look_at
from deepvoxels.lifting import GRU, LiftOperator, integrate_observation
from deepvoxels.voxel_grid import VoxelGrid

rng = np.random.default_rng(0)
grid = VoxelGrid.empty(np.full(3, -0.5), 1.0, res=8, channels=4)
pose = look_at([1.8, 0.6, 0.9], [0.0, 0.0, 0.0], intrinsics(20.0, 32, 32))

# The lift is a fixed sparse matrix per pose; voxels outside the frustum read zero.
op = LiftOperator(pose, grid, image_size=32, feature_size=16)
print(f"{op.valid.sum()} of {op.valid.size} voxels are inside the view frustum")

fmap = Tensor(rng.normal(size=(4, 16, 16)))
lifted = op(fmap)
print("lifted volume", lifted.shape, "non-zero voxels", int(np.any(lifted.data != 0, axis=0).sum()))

# Fusing the same observation twice: the state moves each time, and is stored
# detached so the next step does not backpropagate into the previous one.
gru = GRU(4, rng)
for step in range(3):
    before = grid.features.data.copy()
    h = integrate_observation(grid, fmap, pose, gru, lift_op=op)
    print(f"step {step}: mean |change| {np.abs(h.data - before).mean():.4f}, "
          f"stored state requires grad: {grid.features.requires_grad}")

# The GRU update is a convex mix of the old state and the proposal.
h_prev = Tensor(rng.normal(size=(4, 8, 8, 8)))
new, z, r, s = gru.step(h_prev, lifted, return_gates=True)
inside = np.all((new.data >= np.minimum(h_prev.data, s.data) - 1e-12)
                & (new.data <= np.maximum(h_prev.data, s.data) + 1e-12))
print("new state between old state and proposal everywhere:", bool(inside))

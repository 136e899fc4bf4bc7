"""
Rendering a synthetic dataset
==============================

Training views sit on a hemisphere around the object; test views follow a
spiral between them. Images come from a small z-buffer rasterizer.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from deepvoxels.data import (angle_matrix, default_intrinsics, generate_poses, load_dataset, make_scene,
                             rasterize, render_dataset, sample_tuple)

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
scene = make_scene("occluders")
print(f"scene '{scene.name}': {len(scene.vertices)} triangles")

K = default_intrinsics(64)
train_poses = generate_poses("hemisphere_uniform", 50, 2.2, K=K)
test_poses = generate_poses("archimedean_spiral", 20, 2.2, K=K)

# One view straight from the rasterizer, with its depth buffer.
image, depth = rasterize(scene, train_poses[0], 64, 64)
hit = np.isfinite(depth)
print(f"view 0 covers {hit.mean():.0%} of pixels, depth {depth[hit].min():.2f}..{depth[hit].max():.2f}")

train = render_dataset(out / "train", scene, train_poses, 64)
render_dataset(out / "test", scene, test_poses, 64, split="test")
print("wrote", len(load_dataset(out / "train")), "training and", len(load_dataset(out / "test")), "test views to", out)

# A training step uses one source view and two targets; the source is one of
# the five views closest in angle to the first target.
rng = np.random.default_rng(0)
angles = angle_matrix(train.poses)
for _ in range(3):
    t = sample_tuple(train.poses, rng, angles)
    print(f"source {t.source:2d} -> targets {t.target0:2d}, {t.target1:2d} "
          f"({np.degrees(angles[t.source, t.target0]):.0f} deg apart)")

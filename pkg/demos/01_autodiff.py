"""
Reverse-mode differentiation with a numpy tape
===============================================

Every model in the package is built from ``Tensor`` operations that record how
to push gradients backwards. This script builds a small expression by hand,
backpropagates it, and checks the result against central differences.
"""

import numpy as np

from deepvoxels import autodiff as ad
from deepvoxels.autodiff import Tensor, finite_diff_check

rng = np.random.default_rng(0)

# A 2D convolution followed by a ReLU and a sum gives a scalar we can differentiate.
image = Tensor(rng.normal(size=(3, 8, 8)), requires_grad=True)
weight = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
out = ad.relu(ad.conv2d(image, weight, stride=1, padding=1)).sum()
out.backward()
print("loss", out.item())
print("d loss / d weight has shape", weight.grad.shape)

# The same gradients, estimated by nudging every entry up and down.
err = finite_diff_check(lambda x, w: ad.relu(ad.conv2d(x, w, stride=1, padding=1)).sum(), [image, weight])
print(f"max relative error vs finite differences: {err:.2e}")

# Transposed convolution is the exact adjoint of convolution: <conv(x), y> == <x, convT(y)>.
x = rng.normal(size=(3, 8, 8))
y = rng.normal(size=(4, 4, 4))
w = rng.normal(size=(4, 3, 4, 4))
lhs = np.sum(ad.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data * y)
rhs = np.sum(x * ad.conv_transpose2d(Tensor(y), Tensor(w), stride=2, padding=1).data)
print(f"adjoint identity: {lhs:.6f} vs {rhs:.6f}")

# The full suite the CLI runs as `deepvoxels grad-check`.
from deepvoxels.gradcheck import TOLERANCE, run_suite

for name, e in run_suite(pipeline_entries=2).items():
    print(f"  {name:30s} {e:.1e} {'ok' if e < TOLERANCE else 'FAIL'}")

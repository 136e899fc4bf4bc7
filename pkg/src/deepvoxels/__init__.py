"""Persistent 3D feature grids for novel view synthesis, in numpy.

Submodules:

- ``autodiff``: reverse-mode tensors, convolutions, sparse resampling
- ``camera``: pinhole projection, look-at poses, pose files
- ``voxel_grid``: grid placement and trilinear/bilinear interpolation
- ``lifting``: image-to-grid lifting and the convolutional GRU
- ``projection``: view volumes, soft visibility, depth
- ``networks``: feature extractor, renderer, patch discriminator
- ``data``: scenes, rasterizer, pose paths, datasets, tuple sampling
- ``training``: losses, ADAM, training loop, checkpoints, evaluation
- ``metrics``: PSNR and SSIM
- ``cli``: the ``deepvoxels`` command
"""

from .autodiff import Tensor, no_grad
from .camera import CameraPose, look_at, project, unproject
from .config import NetConfig, TrainConfig
from .metrics import psnr, ssim
from .training import Checkpoint, DeepVoxels, Trainer, evaluate, infer_view, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "CameraPose", "look_at", "project", "unproject", "NetConfig", "TrainConfig",
    "psnr", "ssim", "Checkpoint", "DeepVoxels", "Trainer", "evaluate", "infer_view", "train",
]

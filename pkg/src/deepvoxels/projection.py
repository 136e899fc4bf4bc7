"""Resampling the grid into a target camera's view volume and collapsing it with soft visibility.

View volumes are stored as [f, H', W', D]: feature-map rows, columns, then
depth slices ordered front to back.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraPose, project_points, unproject
from .layers import Module, UNet
from .lifting import feature_to_image_coords
from .voxel_grid import VoxelGrid, interp_weights, sampling_matrix

NEAR_FLOOR = 1e-3


class GridNotVisible(ValueError):
    pass


@dataclass
class CanonicalViewVolume:
    features: Tensor
    depths: np.ndarray
    near: float
    far: float


@dataclass
class VisibilityField:
    weights: Tensor  # [1, H', W', D], sums to one over the last axis

    @property
    def array(self) -> np.ndarray:
        return self.weights.data[0]


def depth_range(grid: VoxelGrid, pose: CameraPose) -> tuple:
    """(near, far) from the camera depths of the grid's 8 corners, near clamped positive."""
    uvd, _ = project_points(pose, grid.corners())
    d = uvd[:, 2]
    far = float(d.max())
    if far <= 0:
        raise GridNotVisible("grid not visible: entirely behind the camera")
    near = max(float(d.min()), NEAR_FLOOR * far)
    return near, far


def slice_depths(near: float, far: float, n: int) -> np.ndarray:
    return near + (np.arange(n) + 0.5) / n * (far - near)


class ViewVolumeOperator:
    """Precomputed trilinear gather from the grid into one camera's view volume."""

    def __init__(self, grid: VoxelGrid, pose: CameraPose, size: int, samples: int, image_size: int,
                 dtype=np.float64):
        self.near, self.far = depth_range(grid, pose)
        self.shape = (size, size, samples)
        z = slice_depths(self.near, self.far, samples)
        rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        u = feature_to_image_coords(cols, image_size, size)
        v = feature_to_image_coords(rows, image_size, size)
        uu = np.broadcast_to(u[..., None], self.shape)
        vv = np.broadcast_to(v[..., None], self.shape)
        dd = np.broadcast_to(z, self.shape)
        world = unproject(pose, (uu, vv, dd))
        coords = grid.world_to_grid(world).reshape(-1, 3)
        idx, w = interp_weights(coords, grid.res)
        self.matrix = sampling_matrix(idx, w, int(np.prod(grid.res)), dtype)
        self.matrix_t = self.matrix.T.tocsr()
        self.depths = np.ascontiguousarray(dd)
        self.coords = coords.reshape(self.shape + (3,))

    def __call__(self, features: Tensor) -> CanonicalViewVolume:
        vol = ad.resample(features, self.matrix, self.shape, self.matrix_t)
        return CanonicalViewVolume(vol, self.depths, self.near, self.far)


def build_view_volume(grid: VoxelGrid, pose: CameraPose, size: int, samples: int, image_size: int,
                      features: Tensor = None) -> CanonicalViewVolume:
    """Resample ``features`` (default: the grid's own) into the camera's view volume."""
    feats = grid.features if features is None else features
    return ViewVolumeOperator(grid, pose, size, samples, image_size, feats.dtype)(feats)


class OcclusionNet(Module):
    """Distance channel, 1x1x1 compression to a few channels, 3D U-Net, one logit per sample."""

    def __init__(self, channels: int, compressed: int, depth: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__(rng, dtype)
        self.conv_param("compress", compressed, channels + 1, 1, 3)
        self.unet = UNet(3, compressed, 1, compressed, depth, rng, dtype, out_gain=1.0)
        self.add_module("unet", self.unet)

    def logits(self, volume: CanonicalViewVolume) -> Tensor:
        span = volume.far - volume.near
        dist = Tensor(((volume.depths - volume.near) / span)[None], dtype=volume.features.dtype)
        x = ad.concat([volume.features, dist], axis=0)
        return self.unet(self.conv("compress", x, 3))

    def __call__(self, volume: CanonicalViewVolume) -> VisibilityField:
        return VisibilityField(ad.softmax(self.logits(volume), axis=-1))


def occlusion_visibility(volume: CanonicalViewVolume, net: OcclusionNet) -> VisibilityField:
    return net(volume)


def uniform_visibility(volume: CanonicalViewVolume) -> VisibilityField:
    """Equal weight on every depth slice; the no-occlusion-reasoning ablation."""
    shape = (1,) + volume.features.shape[1:]
    return VisibilityField(Tensor(np.full(shape, 1.0 / shape[-1]), dtype=volume.features.dtype))


def flatten_weighted(volume: CanonicalViewVolume, vis: VisibilityField) -> Tensor:
    """Visibility-weighted sum over depth: [f, H', W', D] -> [f, H', W']."""
    if vis.weights.shape[1:] != volume.features.shape[1:]:
        raise ValueError(f"visibility {vis.weights.shape} does not match volume {volume.features.shape}")
    return (volume.features * vis.weights).sum(axis=-1)


def depth_from_weights(vis: VisibilityField, volume: CanonicalViewVolume) -> Tensor:
    """Expected depth per ray, [H', W']."""
    if vis.weights.shape[1:] != volume.depths.shape:
        raise ValueError(f"visibility {vis.weights.shape} does not match depths {volume.depths.shape}")
    depths = Tensor(volume.depths[None], dtype=vis.weights.dtype)
    return (vis.weights * depths).sum(axis=-1).reshape(volume.depths.shape[:2])

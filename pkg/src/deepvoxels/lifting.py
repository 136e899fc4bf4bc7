"""Lifting 2D feature maps into the voxel grid and fusing them with a per-voxel GRU."""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraPose, project_points
from .config import NetConfig
from .layers import Module, UNet
from .voxel_grid import VoxelGrid, interp_weights, sampling_matrix


def image_to_feature_coords(uv, image_size, feature_size) -> np.ndarray:
    """Pixel-centre aligned rescale from image pixels to feature-map pixels."""
    scale = np.asarray(feature_size, dtype=np.float64) / np.asarray(image_size, dtype=np.float64)
    return (np.asarray(uv) + 0.5) * scale - 0.5


def feature_to_image_coords(fxy, image_size, feature_size) -> np.ndarray:
    scale = np.asarray(image_size, dtype=np.float64) / np.asarray(feature_size, dtype=np.float64)
    return (np.asarray(fxy) + 0.5) * scale - 0.5


class LiftOperator:
    """Precomputed gather from a source view's feature map into the grid.

    A voxel is in the frustum when its centre lies in front of the camera and
    its bilinear stencil falls entirely inside the feature map; every other
    voxel receives zeros.
    """

    def __init__(self, pose: CameraPose, grid: VoxelGrid, image_size, feature_size, dtype=np.float64):
        image_size = _pair(image_size)
        feature_size = _pair(feature_size)
        centers = grid.voxel_centers().reshape(-1, 3)
        uvd, ok = project_points(pose, centers)
        fxy = image_to_feature_coords(uvd[:, :2], image_size, feature_size)
        fw, fh = feature_size
        with np.errstate(invalid="ignore"):
            inside = (ok & (uvd[:, 2] > 0)
                      & (fxy[:, 0] >= 0) & (fxy[:, 0] <= fw - 1)
                      & (fxy[:, 1] >= 0) & (fxy[:, 1] <= fh - 1))
        idx, w = interp_weights(fxy[:, ::-1], (fh, fw))
        w[~inside] = 0.0
        self.matrix = sampling_matrix(idx, w, fw * fh, dtype)
        self.matrix_t = self.matrix.T.tocsr()
        self.valid = inside.reshape(grid.res)
        self.res = grid.res
        self.feature_size = feature_size

    def __call__(self, feature_map: Tensor) -> Tensor:
        fw, fh = self.feature_size
        if feature_map.shape[1:] != (fh, fw):
            raise ValueError(f"feature map {feature_map.shape} does not match {fh}x{fw}")
        return ad.resample(feature_map, self.matrix, self.res, self.matrix_t)


def _pair(n):
    return (int(n), int(n)) if np.isscalar(n) else (int(n[0]), int(n[1]))


def lift(feature_map: Tensor, pose: CameraPose, grid: VoxelGrid, image_size) -> Tensor:
    """Gather features for every voxel of ``grid`` from ``feature_map`` ([f, H_f, W_f])."""
    fh, fw = feature_map.shape[1:]
    op = LiftOperator(pose, grid, image_size, (fw, fh), feature_map.dtype)
    return op(feature_map)


class GRU(Module):
    """Convolutional GRU whose hidden state is the voxel grid.

    Z = sig(Wz*X + Uz*H + Bz), R = sig(Wr*X + Ur*H + Br),
    S = relu(Ws*X + Us*(R o H) + Bs), H' = (1 - Z) o H + Z o S.
    """

    def __init__(self, channels: int, rng: np.random.Generator, kernel: int = 3, dtype=np.float64):
        super().__init__(rng, dtype)
        if kernel % 2 != 1:
            raise ValueError("GRU kernel must be odd for same padding")
        self.kernel = kernel
        for g in "zrs":
            self.conv_param(f"W{g}", channels, channels, kernel, 3, gain=1.0)
            self.conv_param(f"U{g}", channels, channels, kernel, 3, gain=1.0)
            del self.params[f"U{g}.b"]
            self.params[f"B{g}"] = self.params.pop(f"W{g}.b")

    def _gate_in(self, g: str, x: Tensor, h: Tensor) -> Tensor:
        p = self.kernel // 2
        wx = ad.conv3d(x, self.params[f"W{g}.w"], self.params[f"B{g}"], 1, p)
        uh = ad.conv3d(h, self.params[f"U{g}.w"], None, 1, p)
        return wx + uh

    def step(self, h_prev: Tensor, x: Tensor, return_gates: bool = False):
        if h_prev.shape != x.shape:
            raise ValueError(f"state {h_prev.shape} and observation {x.shape} differ in shape")
        z = ad.sigmoid(self._gate_in("z", x, h_prev))
        r = ad.sigmoid(self._gate_in("r", x, h_prev))
        s = ad.relu(self._gate_in("s", x, r * h_prev))
        h = (1.0 - z) * h_prev + z * s
        return (h, z, r, s) if return_gates else h

    __call__ = step


def gru_step(h_prev: Tensor, x: Tensor, gru: GRU) -> Tensor:
    return gru.step(h_prev, x)


class Inpainter(UNet):
    """3D U-Net applied to the fused volume before projection."""

    def __init__(self, channels: int, depth: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__(3, channels, channels, channels, depth, rng, dtype)


def inpaint3d(h: Tensor, net: Inpainter) -> Tensor:
    return net(h)


def integrate_observation(grid: VoxelGrid, feature_map: Tensor, pose: CameraPose, gru: GRU,
                          image_size=None, lift_op: LiftOperator = None) -> Tensor:
    """One GRU update of the persistent state from a single source view.

    Returns the differentiable new state; ``grid.features`` is replaced by a
    detached copy of it so no gradient crosses iteration boundaries.
    """
    if lift_op is None:
        x = lift(feature_map, pose, grid, image_size)
    else:
        x = lift_op(feature_map)
    h = gru.step(grid.features.detach(), x)
    grid.features = h.detach()
    return h


def build_modules(cfg: NetConfig, rng: np.random.Generator, dtype=np.float64) -> tuple:
    return GRU(cfg.channels, rng, cfg.gru_kernel, dtype), Inpainter(cfg.channels, cfg.inpaint_depth, rng, dtype)

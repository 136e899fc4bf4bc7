"""The persistent feature volume and the interpolation kernels around it.

Continuous grid coordinates put voxel (i, j, k)'s centre at exactly (i, j, k);
the grid's outer faces sit at -0.5 and res - 0.5. Samples falling between a
border voxel and the outside see zero-valued phantom neighbours.
"""

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, resample

MARGIN = 1.1
MIN_SIDE = 1.0


@dataclass
class VoxelGrid:
    origin: np.ndarray
    side: float
    res: tuple
    channels: int
    features: Tensor

    @classmethod
    def empty(cls, origin, side: float, res, channels: int, dtype=np.float64) -> "VoxelGrid":
        if np.isscalar(res):
            res = (int(res),) * 3
        res = tuple(int(r) for r in res)
        if side <= 0 or min(res) < 1:
            raise ValueError(f"invalid grid: side={side}, res={res}")
        feats = Tensor(np.zeros((channels,) + res, dtype=dtype))
        return cls(np.asarray(origin, dtype=np.float64), float(side), res, int(channels), feats)

    @property
    def voxel_size(self) -> np.ndarray:
        return self.side / np.asarray(self.res, dtype=np.float64)

    def world_to_grid(self, x) -> np.ndarray:
        """World points (..., 3) -> continuous grid coordinates."""
        x = np.asarray(x, dtype=np.float64)
        return (x - self.origin) / self.voxel_size - 0.5

    def voxel_centers(self) -> np.ndarray:
        """World-space centres of all voxels, shape (w, h, d, 3)."""
        axes = [self.origin[a] + (np.arange(n) + 0.5) / n * self.side for a, n in enumerate(self.res)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def corners(self) -> np.ndarray:
        """The 8 world-space corners of the grid's bounding cube."""
        return np.array([self.origin + self.side * np.array(c, dtype=np.float64)
                         for c in itertools.product((0, 1), repeat=3)])


def place_grid(points, margin: float = MARGIN, min_side: float = MIN_SIDE) -> tuple:
    """Centre a cubic grid on the point centroid, just large enough to hold every point.

    Returns (origin, side).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot place a grid around an empty point set")
    center = pts.mean(axis=0)
    side = 2.0 * np.abs(pts - center).max() * margin
    if side < 1e-12:
        side = float(min_side)
    return center - side / 2.0, float(side)


def voxel_center(grid: VoxelGrid, i: int, j: int, k: int) -> np.ndarray:
    idx = (i, j, k)
    if any(not 0 <= n < r for n, r in zip(idx, grid.res)):
        raise IndexError(f"voxel index {idx} outside grid of resolution {grid.res}")
    frac = (np.asarray(idx, dtype=np.float64) + 0.5) / np.asarray(grid.res)
    return grid.origin + frac * grid.side


def interp_weights(coords, shape) -> tuple:
    """Multilinear interpolation stencil for continuous lattice coordinates.

    coords: (N, n) with n = len(shape). Returns (flat_indices, weights), both
    (N, 2**n). Corners outside the lattice get weight 0 (and index 0).
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = len(shape)
    coords = np.where(np.isfinite(coords), coords, -2.0)
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    strides = np.cumprod((1,) + tuple(shape[::-1]))[:-1][::-1]
    idx = np.zeros((len(coords), 2 ** n), dtype=np.int64)
    w = np.ones((len(coords), 2 ** n), dtype=np.float64)
    for c, offs in enumerate(itertools.product((0, 1), repeat=n)):
        inside = np.ones(len(coords), dtype=bool)
        for a, o in enumerate(offs):
            pos = base[:, a] + o
            inside &= (pos >= 0) & (pos < shape[a])
            w[:, c] *= frac[:, a] if o else 1.0 - frac[:, a]
            idx[:, c] += np.clip(pos, 0, shape[a] - 1) * strides[a]
        w[~inside, c] = 0.0
        idx[~inside, c] = 0
    return idx, w


def sampling_matrix(idx: np.ndarray, w: np.ndarray, n_in: int, dtype=np.float64):
    """Sparse (N_out x n_in) matrix applying the interpolation stencil."""
    rows = np.repeat(np.arange(len(idx)), idx.shape[1])
    m = sp.csr_matrix((w.reshape(-1).astype(dtype), (rows, idx.reshape(-1))), shape=(len(idx), n_in))
    m.eliminate_zeros()
    return m


def trilinear_sample(volume: Tensor, p) -> Tensor:
    """Sample a [f, w, h, d] volume at continuous grid coordinates.

    p is (3,) or (N, 3); the result is [f] or [f, N].
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    idx, w = interp_weights(pts, volume.shape[1:])
    m = sampling_matrix(idx, w, int(np.prod(volume.shape[1:])), volume.dtype)
    out = resample(volume, m, (len(pts),))
    return out.reshape(volume.shape[0]) if single else out


def bilinear_sample(image: Tensor, p) -> Tensor:
    """Sample a [f, H, W] map at continuous (x, y) = (column, row) positions."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 2)[:, ::-1]  # (row, col) lattice order
    idx, w = interp_weights(pts, image.shape[1:])
    m = sampling_matrix(idx, w, int(np.prod(image.shape[1:])), image.dtype)
    out = resample(image, m, (len(pts),))
    return out.reshape(image.shape[0]) if single else out

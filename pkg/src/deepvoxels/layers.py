"""Parameter containers and the small U-Net shared by the 2D and 3D subnets."""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_CONV = {2: ad.conv2d, 3: ad.conv3d}
_CONV_T = {2: ad.conv_transpose2d, 3: ad.conv_transpose3d}


class Module:
    """Holds named parameter tensors; submodules are flattened with dotted names."""

    def __init__(self, rng: np.random.Generator, dtype=np.float64):
        self.rng = rng
        self.dtype = dtype
        self.params: dict = {}

    def conv_param(self, name: str, c_out: int, c_in: int, k: int, dim: int, transposed: bool = False,
                   gain: float = 2.0) -> None:
        shape = (c_in, c_out) if transposed else (c_out, c_in)
        fan_in = c_in * k ** dim
        w = self.rng.normal(0.0, np.sqrt(gain / fan_in), size=shape + (k,) * dim)
        self.params[name + ".w"] = Tensor(w, requires_grad=True, dtype=self.dtype)
        self.params[name + ".b"] = Tensor(np.zeros(c_out), requires_grad=True, dtype=self.dtype)

    def add_module(self, prefix: str, module: "Module") -> None:
        for name, p in module.params.items():
            self.params[f"{prefix}.{name}"] = p

    def conv(self, name: str, x: Tensor, dim: int, stride: int = 1, padding: int = 0) -> Tensor:
        return _CONV[dim](x, self.params[name + ".w"], self.params[name + ".b"], stride, padding)

    def conv_t(self, name: str, x: Tensor, dim: int, stride: int = 2, padding: int = 1) -> Tensor:
        return _CONV_T[dim](x, self.params[name + ".w"], self.params[name + ".b"], stride, padding)

    def parameters(self) -> dict:
        return self.params

    def zero_(self) -> None:
        """Set every parameter to zero (used by tests of degenerate configurations)."""
        for p in self.params.values():
            p.data[...] = 0.0

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


class UNet(Module):
    """Encoder-decoder with skip connections over 2D or 3D feature maps.

    ``depth`` is the number of stride-2 downsampling steps; channels double at
    every step. Inputs must have spatial extents divisible by 2**depth.
    """

    def __init__(self, dim: int, in_ch: int, out_ch: int, width: int, depth: int,
                 rng: np.random.Generator, dtype=np.float64, out_gain: float = 2.0, norm: bool = False):
        super().__init__(rng, dtype)
        self.dim, self.depth, self.norm = dim, depth, norm
        self.conv_param("in", width, in_ch, 3, dim)
        w = width
        for level in range(depth):
            self.conv_param(f"down{level}", 2 * w, w, 4, dim)
            w *= 2
        for level in reversed(range(depth)):
            self.conv_param(f"up{level}", w // 2, w, 4, dim, transposed=True)
            self.conv_param(f"fuse{level}", w // 2, w, 3, dim)
            w //= 2
        self.conv_param("out", out_ch, width, 3, dim, gain=out_gain)

    def check_extent(self, spatial) -> None:
        m = 2 ** self.depth
        if any(s % m for s in spatial):
            raise ValueError(f"spatial extent {tuple(spatial)} not divisible by {m} (U-Net depth {self.depth})")

    def _act(self, h: Tensor) -> Tensor:
        return ad.relu(ad.instance_norm(h) if self.norm else h)

    def __call__(self, x: Tensor) -> Tensor:
        self.check_extent(x.shape[1:])
        d = self.dim
        h = self._act(self.conv("in", x, d, padding=1))
        skips = []
        for level in range(self.depth):
            skips.append(h)
            h = self._act(self.conv(f"down{level}", h, d, stride=2, padding=1))
        for level in reversed(range(self.depth)):
            up = self._act(self.conv_t(f"up{level}", h, d))
            h = self._act(self.conv(f"fuse{level}", ad.concat([skips[level], up], axis=0), d, padding=1))
        return self.conv("out", h, d, padding=1)

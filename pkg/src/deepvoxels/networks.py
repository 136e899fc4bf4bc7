"""2D networks around the 3D core: feature extraction, rendering, patch discriminator."""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import NetConfig
from .layers import Module, UNet


class FeatureExtractor(Module):
    """Stride-2 convolutions down to the feature-map size, then a 2D U-Net."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__(rng, dtype)
        self.cfg = cfg
        self.stages = cfg.down_stages
        c_in = 3
        for s in range(self.stages):
            self.conv_param(f"stage{s}", cfg.extract_width, c_in, 4, 2)
            c_in = cfg.extract_width
        self.unet = UNet(2, c_in, cfg.channels, cfg.extract_width, cfg.extract_depth, rng, dtype,
                         norm=cfg.instance_norm)
        self.add_module("unet", self.unet)

    def __call__(self, image: Tensor) -> Tensor:
        n = self.cfg.image_size
        if image.shape != (3, n, n):
            raise ValueError(f"expected image of shape (3, {n}, {n}), got {image.shape}")
        h = image
        for s in range(self.stages):
            h = ad.relu(self.conv(f"stage{s}", h, 2, stride=2, padding=1))
        return self.unet(h)


class Renderer(Module):
    """2D U-Net on the flattened view features, then transposed convolutions up to image size."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__(rng, dtype)
        self.cfg = cfg
        self.stages = cfg.down_stages
        w = cfg.render_width
        self.unet = UNet(2, cfg.channels, w, w, cfg.render_depth, rng, dtype, norm=cfg.instance_norm)
        self.add_module("unet", self.unet)
        for s in range(self.stages):
            self.conv_param(f"stage{s}", w, w, 4, 2, transposed=True)
        self.conv_param("rgb", 3, w, 3, 2, gain=1.0)

    def __call__(self, flat: Tensor) -> Tensor:
        m = self.cfg.feature_map_size
        if flat.shape != (self.cfg.channels, m, m):
            raise ValueError(f"expected features of shape ({self.cfg.channels}, {m}, {m}), got {flat.shape}")
        h = ad.relu(self.unet(flat))
        for s in range(self.stages):
            h = ad.relu(self.conv_t(f"stage{s}", h, 2))
        rgb = self.conv("rgb", h, 2, padding=1)
        return 0.5 * (ad.tanh(rgb) + 1.0)


class Discriminator(Module):
    """Fully convolutional patch classifier: one logit per output cell."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__(rng, dtype)
        self.layers = cfg.disc_layers
        c_in, w = 3, cfg.disc_width
        for i in range(self.layers):
            self.conv_param(f"layer{i}", w, c_in, 4, 2)
            c_in, w = w, 2 * w
        self.conv_param("logit", 1, c_in, 3, 2, gain=1.0)

    @property
    def min_size(self) -> int:
        return 2 ** self.layers

    def __call__(self, image: Tensor, frozen: bool = False) -> Tensor:
        """Per-patch logits [1, H / 2**layers, W / 2**layers].

        With ``frozen`` the parameters enter the graph as constants, so a
        generator update cannot leave gradients on them.
        """
        h, w = image.shape[1:]
        m = self.min_size
        if h < m or w < m or h % m or w % m:
            raise ValueError(f"image {h}x{w} too small or not divisible by {m} for the discriminator")
        params = {k: (p.detach() if frozen else p) for k, p in self.params.items()}
        x = image
        for i in range(self.layers):
            x = ad.relu(ad.conv2d(x, params[f"layer{i}.w"], params[f"layer{i}.b"], 2, 1))
        return ad.conv2d(x, params["logit.w"], params["logit.b"], 1, 1)


def feature_extract(image: Tensor, net: FeatureExtractor) -> Tensor:
    return net(image)


def render_image(flat: Tensor, net: Renderer) -> Tensor:
    return net(flat)


def discriminate(image: Tensor, net: Discriminator, frozen: bool = False) -> Tensor:
    return net(image, frozen=frozen)

import numpy as np
import pytest

from deepvoxels.autodiff import Tensor
from deepvoxels.config import NetConfig
from deepvoxels.layers import UNet
from deepvoxels.networks import Discriminator, FeatureExtractor, Renderer, discriminate, feature_extract, render_image


def small_cfg(size):
    return NetConfig(image_size=size, feature_map_size=size // 2, channels=4, extract_width=4, extract_depth=1,
                     render_width=4, render_depth=1, disc_width=4, disc_layers=2)


@pytest.mark.parametrize("size", [16, 32, 64])
def test_shapes_for_config_matrix(size):
    cfg = small_cfg(size)
    rng = np.random.default_rng(0)
    img = Tensor(rng.uniform(size=(3, size, size)))
    f = feature_extract(img, FeatureExtractor(cfg, rng))
    assert f.shape == (4, size // 2, size // 2)
    out = render_image(f, Renderer(cfg, rng))
    assert out.shape == (3, size, size)
    assert np.all(out.data >= 0) and np.all(out.data <= 1)
    assert discriminate(img, Discriminator(cfg, rng)).shape == (1, size // 4, size // 4)


def test_renderer_bounded_under_extreme_inputs():
    cfg = small_cfg(16)
    net = Renderer(cfg, np.random.default_rng(1))
    out = net(Tensor(1e4 * np.random.default_rng(2).normal(size=(4, 8, 8)))).data
    assert np.all(out >= 0) and np.all(out <= 1)


def test_feature_extractor_rejects_wrong_size():
    net = FeatureExtractor(small_cfg(16), np.random.default_rng(0))
    with pytest.raises(ValueError):
        net(Tensor(np.zeros((3, 32, 32))))


def test_discriminator_fully_convolutional_and_zero_params():
    cfg = small_cfg(16)
    d = Discriminator(cfg, np.random.default_rng(0))
    a = d(Tensor(np.random.default_rng(1).uniform(size=(3, 16, 16))))
    b = d(Tensor(np.random.default_rng(1).uniform(size=(3, 32, 32))))
    assert b.data.size == 4 * a.data.size
    d.zero_()
    np.testing.assert_array_equal(d(Tensor(np.ones((3, 16, 16)))).data, 0.0)
    with pytest.raises(ValueError):
        d(Tensor(np.zeros((3, 2, 2))))


def test_frozen_discriminator_leaves_no_grads():
    cfg = small_cfg(16)
    d = Discriminator(cfg, np.random.default_rng(0))
    img = Tensor(np.random.default_rng(1).uniform(size=(3, 16, 16)), requires_grad=True)
    d(img, frozen=True).sum().backward()
    assert img.grad is not None
    assert all(p.grad is None for p in d.params.values())


def test_unet_levels_and_divisibility():
    net = UNet(2, 3, 5, 4, 2, np.random.default_rng(0))
    assert net(Tensor(np.zeros((3, 8, 12)))).shape == (5, 8, 12)
    with pytest.raises(ValueError):
        net(Tensor(np.zeros((3, 6, 8))))
    assert "down1.w" in net.params and "down2.w" not in net.params


def test_config_rejects_bad_sizes():
    with pytest.raises(ValueError):
        NetConfig(image_size=48, feature_map_size=32).validate()
    with pytest.raises(ValueError):
        NetConfig(grid_res=6, inpaint_depth=2).validate()


def test_instance_norm_option_changes_unet_only_in_activation():
    cfg = small_cfg(16)
    cfg.instance_norm = True
    rng = np.random.default_rng(0)
    net = FeatureExtractor(cfg, rng)
    plain = FeatureExtractor(small_cfg(16), np.random.default_rng(0))
    assert net.params.keys() == plain.params.keys()
    img = Tensor(np.random.default_rng(1).uniform(size=(3, 16, 16)))
    out = net(img)
    assert out.shape == (4, 8, 8) and not np.allclose(out.data, plain(img).data)

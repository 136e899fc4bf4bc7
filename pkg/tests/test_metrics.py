import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from deepvoxels.metrics import PSNR_CAP, gaussian_window, psnr, ssim


def skimage_ssim(a, b):
    return structural_similarity(a, b, channel_axis=0, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False)


def test_psnr_known_value_and_cap():
    a = np.zeros((3, 8, 8))
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a) == PSNR_CAP
    assert psnr(a, a + 1e-6) == PSNR_CAP
    with pytest.raises(ValueError):
        psnr(a, np.zeros((3, 8, 7)))


def test_ssim_identical_is_one():
    a = np.random.default_rng(0).uniform(size=(3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_gaussian_window_normalised():
    g = gaussian_window()
    assert len(g) == 11 and g.sum() == pytest.approx(1.0) and g[5] == g.max()


@pytest.mark.parametrize("seed", range(4))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(3, 32, 32))
    b = np.clip(a + rng.normal(scale=0.1 * (seed + 1), size=a.shape), 0, 1)
    # skimage crops half a window from each border before averaging, which equals the valid-window mean
    assert ssim(a, b) == pytest.approx(skimage_ssim(a, b), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 3, 12, 12))
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) < 1e-12
    assert -1.0 <= s <= 1.0


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_psnr_matches_mse_formula():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(2, 3, 10, 10))
    assert psnr(a, b) == pytest.approx(-10 * math.log10(np.mean((a - b) ** 2)))

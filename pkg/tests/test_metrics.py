import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blocksplat.metrics import psnr, ssim


def _pair():
    rng = np.random.default_rng(7)
    a = rng.random((24, 20, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    return a, b


def test_ssim_matches_reference_value():
    # frozen from skimage.metrics.structural_similarity(gaussian_weights=True,
    # sigma=1.5, use_sample_covariance=False, data_range=1, channel_axis=2)
    a, b = _pair()
    assert ssim(a, b) == pytest.approx(0.9478887499810537, abs=1e-6)


def test_ssim_identity_and_symmetry():
    a, b = _pair()
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), noise=st.floats(0.0, 1.0))
def test_ssim_bounded(seed, noise):
    rng = np.random.default_rng(seed)
    a = rng.random((12, 14, 3))
    b = np.clip(a + noise * rng.standard_normal(a.shape), 0, 1)
    assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_rejects_small_or_mismatched():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))


def test_psnr_examples():
    a = np.full((8, 8, 3), 0.5)
    assert psnr(a, a) == float("inf")
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from raywave.errors import ConfigurationError
from raywave.imaging import (
    PSNR_CAP,
    convolve,
    feather_weights,
    psnr,
    simulate_capture,
    ssim,
    wiener_reconstruct,
    write_metrics_csv,
)


def _delta(k=9, c=3, tiles=1):
    d = torch.zeros(tiles, c, k, k, dtype=torch.float64)
    d[..., k // 2, k // 2] = 1.0
    return d


def _blur(k=7, sigma=1.2):
    y, x = np.mgrid[:k, :k] - k // 2
    g = np.exp(-(x**2 + y**2) / (2 * sigma**2))
    return g / g.sum()


@given(st.integers(8, 80), st.integers(1, 5))
def test_feather_weights_partition_of_unity(n, tiles):
    w = feather_weights(n, tiles)
    assert torch.allclose(w.sum(0), torch.ones(n, dtype=torch.float64), atol=1e-12)
    assert float(w.min()) >= 0


def test_delta_kernel_is_identity():
    rng = np.random.default_rng(0)
    img = rng.random((40, 48, 3))
    out = convolve(img, _delta(tiles=4), grid_shape=(2, 2))
    assert np.abs(out.numpy() - img).max() < 1e-12


def test_constant_image_preserved_without_seams():
    img = np.full((48, 48, 3), 0.37)
    rng = np.random.default_rng(1)
    k = torch.as_tensor(rng.random((9, 3, 7, 7)))
    k = k / k.sum(dim=(-2, -1), keepdim=True)
    out = convolve(img, k, grid_shape=(3, 3))
    assert np.abs(out.numpy() - 0.37).max() < 1e-12


def test_single_tile_matches_direct_convolution():
    rng = np.random.default_rng(2)
    img = rng.random((32, 32))
    g = _blur()
    ours = convolve(img, g).numpy()
    ref = ndimage.convolve(img, g, mode="mirror")
    assert np.abs(ours - ref).max() < 1e-12


def test_asymmetric_kernel_orientation():
    img = np.zeros((21, 21))
    img[10, 10] = 1.0
    k = np.zeros((5, 5))
    k[2, 4] = 1.0  # shifts right by 2 under convolution
    out = convolve(img, k).numpy()
    assert out[10, 12] == pytest.approx(1.0)


def test_capture_noise_is_seeded_and_clipped():
    img = np.full((16, 16, 3), 0.5)
    a = simulate_capture(img, _delta(), 0.01, seed=3)
    b = simulate_capture(img, _delta(), 0.01, seed=3)
    c = simulate_capture(img, _delta(), 0.01, seed=4)
    assert torch.equal(a, b) and not torch.equal(a, c)
    assert float(a.std()) == pytest.approx(0.01, rel=0.15)
    bright = simulate_capture(np.ones((8, 8)), _delta(c=1), 0.2, seed=0)
    assert float(bright.max()) <= 1.0


def test_wiener_inverts_blur_without_noise():
    rng = np.random.default_rng(5)
    img = ndimage.gaussian_filter(rng.random((64, 64)), 2.0)
    g = _blur(sigma=0.8)
    raw = simulate_capture(img, g, 0.0)
    rec = wiener_reconstruct(raw, g, snr=1e8)
    assert psnr(rec, img) > psnr(raw, img) + 10


def test_wiener_rejects_bad_snr():
    with pytest.raises(ConfigurationError):
        wiener_reconstruct(np.zeros((8, 8)), _delta(c=1), snr=0)


def test_channel_mismatch():
    with pytest.raises(ConfigurationError):
        convolve(np.zeros((8, 8, 3)), torch.zeros(1, 2, 3, 3))
    with pytest.raises(ConfigurationError):
        convolve(np.zeros((8, 8, 3)), _delta(tiles=3), grid_shape=(2, 2))


def test_psnr_matches_skimage():
    rng = np.random.default_rng(6)
    a = rng.random((20, 20, 3))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    assert psnr(a, b) == pytest.approx(peak_signal_noise_ratio(a, b, data_range=1.0), abs=1e-10)
    assert psnr(a, a) == PSNR_CAP


@pytest.mark.parametrize("shape", [(40, 40), (36, 44, 3)])
def test_ssim_matches_skimage(shape):
    rng = np.random.default_rng(7)
    a = rng.random(shape)
    b = np.clip(a + 0.1 * rng.standard_normal(shape), 0, 1)
    ref = structural_similarity(
        a,
        b,
        data_range=1.0,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        channel_axis=-1 if len(shape) == 3 else None,
    )
    assert ssim(a, b) == pytest.approx(ref, abs=1e-10)
    assert ssim(a, a) == pytest.approx(1.0)


def test_metric_shape_mismatch():
    with pytest.raises(ConfigurationError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))


def test_metrics_csv(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics_csv(p, [{"name": "x", "psnr": 30.0, "ssim": 0.9}])
    assert p.read_text().splitlines() == ["name,psnr,ssim", "x,30.0,0.9"]


def test_convolution_is_differentiable():
    k = torch.as_tensor(_blur(), dtype=torch.float64).requires_grad_(True)
    img = torch.rand(16, 16, dtype=torch.float64)
    convolve(img, k).pow(2).sum().backward()
    assert k.grad is not None and torch.isfinite(k.grad).all()


def test_psnr_zero_vs_one_is_zero_db():
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0

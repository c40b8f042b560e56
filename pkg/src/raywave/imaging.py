"""Spatially varying capture simulation, Wiener reconstruction and image metrics.

Images are linear RGB, H×W×3 in [0, 1]. The image is split into a grid of
tiles matching the PSF field grid; each tile's region is convolved with its
own kernel and the results are blended with linear feathering across a 25 %
overlap. The blend weights form a partition of unity, so a unit-sum kernel
maps a constant image to itself with no seams.

All operations accept numpy arrays or torch tensors and are differentiable
in torch.
"""

from __future__ import annotations

import csv
import math

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigurationError

OVERLAP = 0.25
PSNR_CAP = 99.0


def _t(x, dtype=torch.float64):
    if torch.is_tensor(x):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def feather_weights(n, tiles, overlap=OVERLAP, dtype=torch.float64):
    """1-D blend weights, shape (tiles, n), summing to one at every sample.

    Tile k owns [k·n/tiles, (k+1)·n/tiles); weights ramp linearly over a band
    of width ``overlap`` × tile size centered on each internal boundary.
    """
    x = torch.arange(n, dtype=dtype) + 0.5
    size = n / tiles
    o = max(overlap * size, 1e-9)
    w = torch.ones(tiles, n, dtype=dtype)
    for k in range(tiles):
        if k > 0:
            w[k] *= torch.clamp((x - (k * size - o / 2)) / o, 0.0, 1.0)
        if k < tiles - 1:
            w[k] *= torch.clamp(((k + 1) * size + o / 2 - x) / o, 0.0, 1.0)
    return w


def _support(weights):
    nz = torch.nonzero(weights > 0).ravel()
    return int(nz[0]), int(nz[-1]) + 1


def _embed_kernel(kernel, shape):
    """Kernel placed in a zero array of ``shape`` with its center (w//2) at index 0."""
    kh, kw = kernel.shape[-2:]
    out = kernel.new_zeros(*kernel.shape[:-2], *shape)
    out[..., :kh, :kw] = kernel
    return torch.roll(out, shifts=(-(kh // 2), -(kw // 2)), dims=(-2, -1))


def _reflect_pad(x, pad):
    """Reflect-pad the last two dims of a (C, H, W) tensor, repeating if needed."""
    out = x
    remaining = pad
    while remaining > 0:
        step = min(remaining, out.shape[-1] - 1, out.shape[-2] - 1)
        if step <= 0:
            return torch.nn.functional.pad(out[None], (remaining,) * 4, mode="replicate")[0]
        out = torch.nn.functional.pad(out[None], (step,) * 4, mode="reflect")[0]
        remaining -= step
    return out


def _region_filter(region, kernel, margin, op):
    """Apply a frequency-domain operator to a reflect-padded region.

    ``region`` is (C, h, w), ``kernel`` (C, k, k). ``op(X, K)`` gets the
    spectra of the padded region and centered kernel.
    """
    padded = _reflect_pad(region, margin)
    shape = padded.shape[-2:]
    k = _embed_kernel(kernel, shape)
    y = torch.fft.ifft2(op(torch.fft.fft2(padded), torch.fft.fft2(k))).real
    return y[..., margin : margin + region.shape[-2], margin : margin + region.shape[-1]]


def _tiled(image, kernels, grid_shape, op, overlap=OVERLAP):
    """Blend per-tile filtered copies of ``image`` (C, H, W) using ``kernels`` (T, C, k, k)."""
    c, h, w = image.shape
    rows, cols = grid_shape
    if kernels.shape[0] != rows * cols:
        raise ConfigurationError(f"{kernels.shape[0]} kernels for a {rows}x{cols} tile grid")
    if kernels.shape[1] != c:
        raise ConfigurationError(f"kernels have {kernels.shape[1]} channels, image has {c}")
    ksize = kernels.shape[-1]
    margin = ksize
    wy = feather_weights(h, rows, overlap, image.dtype)
    wx = feather_weights(w, cols, overlap, image.dtype)
    out = torch.zeros_like(image)
    for i in range(rows):
        y0, y1 = _support(wy[i])
        for j in range(cols):
            x0, x1 = _support(wx[j])
            # Extend the region so the kernel sees real neighbours, not padding.
            ry0, ry1 = max(y0 - ksize, 0), min(y1 + ksize, h)
            rx0, rx1 = max(x0 - ksize, 0), min(x1 + ksize, w)
            filtered = _region_filter(image[:, ry0:ry1, rx0:rx1], kernels[i * cols + j], margin, op)
            blend = wy[i, y0:y1, None] * wx[j, None, x0:x1]
            tile = blend * filtered[:, y0 - ry0 : y1 - ry0, x0 - rx0 : x1 - rx0]
            out = _accumulate(out, tile, y0, x0)
    return out


def _accumulate(out, tile, y0, x0):
    pad = (x0, out.shape[-1] - x0 - tile.shape[-1], y0, out.shape[-2] - y0 - tile.shape[-2])
    return out + torch.nn.functional.pad(tile, pad)


def _kernels_and_grid(stack_or_kernels, grid_shape=None, depth_index=0):
    if hasattr(stack_or_kernels, "channel_kernels"):
        k = stack_or_kernels.channel_kernels(depth_index)
        return _t(k), stack_or_kernels.fov_shape
    k = _t(stack_or_kernels) if not torch.is_tensor(stack_or_kernels) else stack_or_kernels
    if k.dim() == 2:
        k = k[None, None]
    elif k.dim() == 3:
        k = k[None]
    return k, grid_shape or (1, k.shape[0])


def _as_chw(image):
    x = image if torch.is_tensor(image) else _t(image)
    if x.dim() == 2:
        return x[None], True
    if x.dim() != 3 or x.shape[-1] not in (1, 3):
        raise ConfigurationError(f"image must be H×W or H×W×3, got {tuple(x.shape)}")
    return x.permute(2, 0, 1), False


def _from_chw(x, gray):
    return x[0] if gray else x.permute(1, 2, 0)


def convolve(image, kernels, grid_shape=None, depth_index=0):
    """Spatially varying convolution without noise or clipping.

    ``kernels`` is a PsfStack or a tensor (T, C, k, k) / (C, k, k) / (k, k).
    The kernel center is at index k//2.
    """
    x, gray = _as_chw(image)
    k, gs = _kernels_and_grid(kernels, grid_shape, depth_index)
    k = k.to(x.dtype)
    if k.shape[1] != x.shape[0]:
        if k.shape[1] == 1:
            k = k.expand(-1, x.shape[0], -1, -1)
        else:
            raise ConfigurationError(f"PSF has {k.shape[1]} channels, image has {x.shape[0]}")
    y = _tiled(x, k, gs, lambda X, K: X * K)
    return _from_chw(y, gray)


def simulate_capture(image, stack, noise_sigma=0.01, seed=0, grid_shape=None, depth_index=0, clip=True):
    """Blurred, noisy sensor image.

    Noise is additive Gaussian with std ``noise_sigma`` drawn from a seeded
    generator; the result is clipped to [0, 1] when ``clip`` is set.
    """
    y = convolve(image, stack, grid_shape, depth_index)
    if noise_sigma > 0:
        g = torch.Generator().manual_seed(int(seed))
        noise = torch.randn(tuple(y.shape), generator=g, dtype=torch.float64).to(y.dtype)
        y = y + noise_sigma * noise
    if clip:
        y = torch.clamp(y, 0.0, 1.0)
    return y


def wiener_reconstruct(raw, stack, snr=100.0, grid_shape=None, depth_index=0):
    """Per-tile Wiener deconvolution, W = conj(K) / (|K|² + 1/snr), blended like the capture."""
    if not snr > 0:
        raise ConfigurationError(f"snr must be > 0, got {snr}")
    x, gray = _as_chw(raw)
    k, gs = _kernels_and_grid(stack, grid_shape, depth_index)
    k = k.to(x.dtype)
    if k.shape[1] != x.shape[0]:
        if k.shape[1] == 1:
            k = k.expand(-1, x.shape[0], -1, -1)
        else:
            raise ConfigurationError(f"PSF has {k.shape[1]} channels, image has {x.shape[0]}")
    inv = 1.0 / snr
    y = _tiled(x, k, gs, lambda X, K: X * K.conj() / (K.real**2 + K.imag**2 + inv))
    return _from_chw(y, gray)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _np(x):
    return x.detach().cpu().numpy().astype(np.float64) if torch.is_tensor(x) else np.asarray(x, dtype=np.float64)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ConfigurationError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a, b, data_range=1.0):
    """Peak signal-to-noise ratio in dB, capped at 99 dB for identical inputs."""
    a, b = _np(a), _np(b)
    _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def ssim(a, b, data_range=1.0, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity with an 11×11 Gaussian window (σ = 1.5).

    Color images are scored per channel and averaged. Statistics use the
    population (biased) covariance, and a 5-pixel border is excluded.
    """
    a, b = _np(a), _np(b)
    _check_shapes(a, b)
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], data_range, sigma, k1, k2) for c in range(a.shape[-1])]))
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(x):
        return ndimage.gaussian_filter(x, sigma, truncate=3.5, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    va = filt(a * a) - mu_a**2
    vb = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
    r = int(3.5 * sigma + 0.5)
    return float(s[r:-r, r:-r].mean())


def write_metrics_csv(path, rows):
    """``rows``: iterable of dicts with at least name, psnr, ssim."""
    rows = list(rows)
    keys = list(rows[0].keys()) if rows else ["name", "psnr", "ssim"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)

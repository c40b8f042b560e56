"""Ready-made design runs on the bundled fixtures.

``achromat_*`` work on the singlet: a paraxial two-wavelength DOE as the
baseline, and an even-radial DOE plus sensor gap optimized for the pooled
polychromatic RMS spot over three fields. ``edof_*`` work on the asphere:
an odd+even DOE optimized for the worst-depth Wiener loss over three object
depths, with a penalty on the spread of PSF second moments.

Sample images come from ``skimage.data``. Training and test sets are kept
disjoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from . import io
from .doe import DoeProfile
from .errors import ConfigurationError
from .fixtures import edof_scenario, refocus, singlet_scenario
from .geometry import LensSystem
from .imaging import psnr, simulate_capture, wiener_reconstruct
from .optim import (
    OptConfig,
    OptResult,
    ParamVector,
    doe_params,
    optimize,
    psf_compactness,
    rms_spot_size,
    spot_objective,
    split_params,
    wiener_objective,
)
from .psf import build_stack, compute_psf, fov_grid
from .reference import focal_distances, paraxial_achromat_doe
from .tracing import SourceSpec

TRAIN_IMAGES = ("camera", "coins", "gravel")
TEST_IMAGES = ("astronaut", "coffee", "chelsea")
EVAL_WAVELENGTHS = (0.62, 0.55, 0.46)  # one per color channel


def sample_image(name, size, gray=False):
    """A ``skimage.data`` image, linearized, resized to size×size, in [0, 1]."""
    from skimage import data, transform

    try:
        im = getattr(data, name)()
    except AttributeError:
        raise ConfigurationError(f"unknown sample image {name!r}") from None
    im = im.astype(np.float64) / (65535.0 if im.dtype == np.uint16 else 255.0)
    if im.ndim == 3:
        im = im[..., :3]
    elif not gray:
        im = np.repeat(im[..., None], 3, axis=2)
    if gray and im.ndim == 3:
        im = im.mean(axis=-1)
    im = io.srgb_to_linear(im)
    shape = (size, size) + im.shape[2:]
    return transform.resize(im, shape, anti_aliasing=True)


def _frozen(doe: DoeProfile):
    return doe.with_coeffs(tuple(float(v) for v in doe.coeffs))


# ---------------------------------------------------------------------------
# Singlet achromat
# ---------------------------------------------------------------------------


@dataclass
class Design:
    name: str
    lens: LensSystem
    doe: DoeProfile
    result: OptResult | None = None


def achromat_baseline():
    """No-DOE lens and the paraxial achromat (refocused at 0.55 µm)."""
    sc = singlet_scenario()
    f0 = focal_distances(sc.lens, (0.46, 0.62))
    doe = paraxial_achromat_doe(f0, sc.doe)
    return Design("none", sc.lens, sc.doe), Design("paraxial", refocus(sc.lens, 0.55, doe), doe)


def achromat_params(sc=None, phase_scale=300.0):
    sc = sc or singlet_scenario()
    p = doe_params(sc.doe, sc.lens, optimize_distance=True, distance_scale=1.0)
    return ParamVector(p.names, p.values, [phase_scale] * len(sc.doe.coeffs) + [1.0])


def achromat_optimize(iterations=200, lr=0.05, seed=0, spp=2_500):
    """Even-radial DOE and sensor gap minimizing the mean polychromatic RMS spot."""
    sc = singlet_scenario()
    p = achromat_params(sc)
    obj = spot_objective(sc.lens, sc.doe, p.names, sc.fovs, spp=spp, seed=seed)
    res = optimize(p, obj, OptConfig(lr=lr, iterations=iterations, seed=seed), wavelengths=sc.wavelengths)
    doe, dist = split_params(res.params.values, sc.doe, p.names)
    lens = sc.lens.with_sensor_distance(float(dist)) if dist is not None else sc.lens
    return Design("optimized", lens, _frozen(doe), res)


def spot_report(design: Design, spp=2_500):
    sc = singlet_scenario()
    per, mean = rms_spot_size(design.lens, design.doe, sc.fovs, sc.wavelengths, spp=spp)
    return [float(v) for v in per], float(mean)


def image_psnr(design: Design, images, spp=None, snr=100.0, noise_sigma=0.01, wavelengths=EVAL_WAVELENGTHS, n_fov=3):
    """Mean post-Wiener PSNR over ``images`` with a 3×3 PSF grid across the full field."""
    sc = singlet_scenario()
    fovs, shape = fov_grid(max(f[1] for f in sc.fovs), n_fov)
    stack = build_stack(design.lens, design.doe, fovs, wavelengths, grid=sc.grid, spp=spp or sc.spp, fov_shape=shape)
    vals = []
    for k, im in enumerate(images):
        raw = simulate_capture(im, stack, noise_sigma, seed=k)
        vals.append(psnr(wiener_reconstruct(raw, stack, snr=snr).clamp(0, 1), im))
    return float(np.mean(vals)), stack


# ---------------------------------------------------------------------------
# Extended depth of field
# ---------------------------------------------------------------------------

EDOF_START = (0.0, 0.0, 500.0, 0.0, 0.0, 0.0)


def edof_grid():
    sc = edof_scenario()
    return replace(sc.grid, sampling="grid")


def edof_optimize(
    iterations=60,
    lr=0.03,
    phase_scale=10.0,
    rho_edge=0.55,
    moment_balance=0.002,
    train_size=64,
    start=EDOF_START,
    seed=0,
):
    """Odd+even DOE minimizing the worst-depth Wiener loss plus a moment-spread penalty.

    ``rho_edge`` is the beam radius at the DOE as a fraction of the DOE half
    diagonal. The start point has a little primary spherical, which breaks
    the symmetry between the near and far depths.
    """
    sc = edof_scenario()
    grid = edof_grid()
    doe = sc.doe.with_coeffs(tuple(start))
    p = doe_params(doe, phase_scale=phase_scale, rho_edge=rho_edge)
    train = [sample_image(n, train_size, gray=True) for n in TRAIN_IMAGES]
    obj = wiener_objective(
        sc.lens,
        sc.doe,
        p.names,
        train,
        grid,
        depths=sc.depths,
        fovs=((0.0, 0.0),) * len(train),
        spp=sc.spp,
        seed=seed,
        alpha=0.1,
        depth_reduce="max",
        moment_balance=moment_balance,
    )
    res = optimize(p, obj, OptConfig(lr=lr, iterations=iterations, seed=seed), wavelengths=(0.55,))
    d, _ = split_params(res.params.values, sc.doe, p.names)
    return Design("edof", sc.lens, _frozen(d), res)


def edof_report(doe: DoeProfile, images, snr=100.0, noise_sigma=0.01):
    """Per-depth PSF second moments (px²) and mean post-Wiener PSNR (dB)."""
    sc = edof_scenario()
    grid = edof_grid()
    moments, scores = [], []
    with torch.no_grad():
        for z in sc.depths:
            src = SourceSpec(field=(0.0, 0.0), wavelength=0.55, spp=sc.spp, depth=z)
            k = compute_psf(sc.lens, doe, src, grid).patch
            moments.append(float(psf_compactness(k)))
            ps = []
            for i, im in enumerate(images):
                raw = simulate_capture(im, k, noise_sigma, seed=i)
                ps.append(psnr(wiener_reconstruct(raw, k, snr=snr).clamp(0, 1), im))
            scores.append(float(np.mean(ps)))
    return moments, scores


def moment_ratio(moments):
    return max(moments) / min(moments)


def depth_label(z):
    return "inf" if math.isinf(z) else f"{z:g}mm"

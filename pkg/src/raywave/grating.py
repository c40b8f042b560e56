"""Local-grating ray model of a DOE.

Rays crossing the DOE have their transverse direction cosines shifted by
(λ/2π)·∇φ, i.e. the first-order grating equation applied to the local
period. This is the baseline the ray-wave model is compared against, and the
cheap deflection used for RMS spot sizes and chief-ray placement.
"""

from __future__ import annotations

import math
from dataclasses import replace

import torch

from .doe import DoeProfile, native_phase, polynomial_phase_gradient, remap_phase
from .errors import ModelInapplicableError
from .tracing import Invalid, RayBundle

# Adjacent-pixel phase jump above which a map counts as discontinuous.
JUMP_THRESHOLD = math.pi


def grating_ray_deflect(bundle: RayBundle, grad, wavelength=None) -> RayBundle:
    """Add (λ/2π)·∇φ to the transverse direction cosines.

    ``grad`` is (gx, gy) in rad/mm at each ray. The axial component is
    recomputed from the unit-length constraint, so a normally incident ray on
    a grating of period Λ leaves with sin θ = λ/Λ. Rays pushed past grazing
    are marked invalid.
    """
    lam = (bundle.wavelength if wavelength is None else wavelength) * 1e-3
    gx, gy = grad
    k = lam / (2 * math.pi)
    dx = bundle.d[:, 0] + k * gx
    dy = bundle.d[:, 1] + k * gy
    t2 = dx * dx + dy * dy
    evanescent = t2 >= 1.0
    dz = torch.sqrt(torch.clamp(1.0 - t2, min=1e-30))
    d = torch.stack([dx, dy, dz], dim=-1)
    d = torch.where(evanescent[:, None], bundle.d, d)
    return replace(bundle, d=d).kill(evanescent, Invalid.TIR)


def discontinuity_mask(phase):
    """Native pixels adjacent to a phase jump larger than the threshold."""
    ph = phase.detach()
    bad = torch.zeros_like(ph, dtype=torch.bool)
    jx = (ph[:, 1:] - ph[:, :-1]).abs() > JUMP_THRESHOLD
    jy = (ph[1:, :] - ph[:-1, :]).abs() > JUMP_THRESHOLD
    bad[:, 1:] |= jx
    bad[:, :-1] |= jx
    bad[1:, :] |= jy
    bad[:-1, :] |= jy
    return bad


def _pixel_index(doe: DoeProfile, x, y):
    h, w = doe.native_shape
    f = doe.feature_size * 1e-3
    j = torch.floor((x.detach() - doe.center[0] + doe.size[1] / 2) / f).long().clamp(0, w - 1)
    i = torch.floor((y.detach() - doe.center[1] + doe.size[0] / 2) / f).long().clamp(0, h - 1)
    return i, j


def pixel_phase_gradient(doe: DoeProfile, x, y):
    """Central-difference gradient (rad/mm) of a pixel-wise map at the pixels under (x, y)."""
    ph = doe.phase
    f = doe.feature_size * 1e-3
    gx = torch.zeros_like(ph)
    gy = torch.zeros_like(ph)
    gx[:, 1:-1] = (ph[:, 2:] - ph[:, :-2]) / (2 * f)
    gy[1:-1, :] = (ph[2:, :] - ph[:-2, :]) / (2 * f)
    i, j = _pixel_index(doe, x, y)
    return gx[i, j], gy[i, j]


def check_applicable(doe: DoeProfile, bundle: RayBundle):
    """Raise ModelInapplicableError if any live ray sits on a phase discontinuity.

    Polynomial profiles are continuous by construction (their 2π wrapping is
    a fabrication detail the first-order grating term already accounts for);
    pixel maps are checked cell by cell.
    """
    if doe.kind != "pixel":
        return
    live = bundle.valid
    i, j = _pixel_index(doe, bundle.o[live, 0], bundle.o[live, 1])
    bad = discontinuity_mask(native_phase(doe))[i, j]
    if bool(bad.any()):
        raise ModelInapplicableError(
            f"grating-ray model inapplicable: {int(bad.sum())} rays cross phase jumps "
            f"larger than π between adjacent DOE cells"
        )


def doe_deflector(doe: DoeProfile, wavelength=None):
    """Callable for ``trace_surfaces(doe_deflect=...)``.

    A wrapped (kinoform) profile steers light into its first diffraction
    order, so the deflection uses ∇φ0 with the actual wavelength. An unwrapped
    relief acts like a thin refractive plate and uses the remapped ∇φλ.
    """

    def deflect(bundle):
        check_applicable(doe, bundle)
        lam = bundle.wavelength if wavelength is None else wavelength
        x, y = bundle.o[:, 0], bundle.o[:, 1]
        if doe.kind == "pixel":
            gx, gy = pixel_phase_gradient(doe, x, y)
        else:
            gx, gy = polynomial_phase_gradient(doe, x, y)
        if not doe.wrap or doe.kind == "pixel":
            gx = remap_phase(gx, lam, doe.substrate, doe.design_wavelength)
            gy = remap_phase(gy, lam, doe.substrate, doe.design_wavelength)
        return grating_ray_deflect(bundle, (gx, gy), lam)

    return deflect

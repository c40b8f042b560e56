"""Ground truth and baselines.

* A pure scalar-diffraction oracle for a thin lens followed by a DOE.
* The same fixture run through the ray-wave model (ideal lens in the tracer).
* The grating-equation ray model, which bends rays by the local phase
  gradient and histograms them on the sensor.
* A paraxial achromat DOE solved from traced focal distances.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .doe import FUSED_SILICA, DoeProfile, doe_phase, quantize, zero_doe
from .errors import ConfigurationError, ModelInapplicableError, SimulationError
from .geometry import AIR, DTYPE, LensSystem, SensorSpec, SurfaceSpec, refractive_index
from .grating import doe_deflector, grating_ray_deflect
from .psf import (
    GridConfig,
    PsfResult,
    compute_psf,
    crop_valid,
    field_to_psf,
    place_source,
    sensor_coordinates,
)
from .tracing import SourceSpec, propagate_rays_to_plane, sample_source, trace_surfaces
from .wavefield import CDTYPE, ComplexField

__all__ = [
    "ThinLensFixture",
    "thinlens_fixtures",
    "oracle_psf",
    "raywave_thinlens_psf",
    "grating_ray_deflect",
    "grating_ray_psf",
    "paraxial_focus",
    "focal_distances",
    "paraxial_achromat_doe",
    "ncc",
    "relative_l2",
    "compare_fixture",
]


@dataclass(frozen=True)
class ThinLensFixture:
    """Ideal thin lens, aperture stop in its plane, DOE right behind it."""

    name: str
    focal_length: float  # mm
    aperture: float  # mm, diameter or side length
    doe: DoeProfile
    distance: float  # DOE to sensor, mm
    aperture_shape: str = "square"
    sensor_pitch: float = 8.0  # µm
    sensor_resolution: int = 512
    grid: GridConfig = GridConfig(field_pitch=4.0, field_window=512, psf_window=64)

    def __post_init__(self):
        if not self.focal_length > 0:
            raise ConfigurationError("focal_length must be > 0")
        if self.aperture / 2 > min(self.doe.size) / 2 + 1e-12:
            raise ConfigurationError("aperture exceeds the DOE extent")

    def lens(self) -> LensSystem:
        half = self.aperture / 2
        reach = 2 * max(self.doe.size)
        surfaces = (
            SurfaceSpec("stop", half, aperture_shape=self.aperture_shape),
            SurfaceSpec("ideal-lens", reach, focal_length=self.focal_length, aperture_shape="square"),
            SurfaceSpec("doe-plane", reach, thickness=self.distance, aperture_shape="square"),
            SurfaceSpec("sensor", reach, aperture_shape="square"),
        )
        res = (self.sensor_resolution, self.sensor_resolution)
        return LensSystem(surfaces, SensorSpec(res, self.sensor_pitch, 0.0), f"thinlens-{self.name}")


def _diffractive_lens_phase(f_d, lam0_um, half_diag):
    """α1 of an even-radial profile equal to -πr²/(λ0 f_d)."""
    return -math.pi * half_diag**2 / (lam0_um * 1e-3 * f_d)


def thinlens_fixtures(spp_grid=None):
    """The three validation fixtures: clear square aperture, continuous kinoform, 16-level DOE.

    f = 100 mm, 1 mm aperture, DOE 2.048 mm with 8 µm cells, field pitch 4 µm.
    The coefficient values are representative choices, not published ones.
    """
    f = 100.0
    size = 2.048
    common = dict(design_wavelength=0.55, substrate=FUSED_SILICA, size=(size, size), feature_size=8.0)
    half_diag = 0.5 * math.hypot(size, size)
    rho_edge = 0.5 / half_diag
    flat = DoeProfile(kind="even", coeffs=(0.0,), **common)
    # Continuous kinoform: a weak diffractive lens plus about 1.5 waves of
    # spherical aberration at the aperture edge, wrapped to one 2π depth.
    a1 = _diffractive_lens_phase(400.0, 0.55, half_diag)
    a2 = 3.0 * math.pi / rho_edge**4
    kino = DoeProfile(kind="even", coeffs=(a1, a2), wrap=True, **common)
    f_kino = 1.0 / (1.0 / f + 1.0 / 400.0)
    # 16-level Fresnel lens, f_d = 200 mm.
    fresnel = DoeProfile(kind="even", coeffs=(_diffractive_lens_phase(200.0, 0.55, half_diag),), **common)
    binary16 = quantize(fresnel, 16)
    f_bin = 1.0 / (1.0 / f + 1.0 / 200.0)
    return [
        ThinLensFixture("aperture", f, 1.0, flat, f),
        ThinLensFixture("kinoform", f, 1.0, kino, f_kino),
        # About 1.3 % of a 16-level profile's energy goes to high orders that
        # leave the window by design, so the sampling check gets more room.
        ThinLensFixture("quantized16", f, 1.0, binary16, f_bin, grid=replace(ThinLensFixture.grid, alias_tolerance=0.02)),
    ]


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


def _aperture_mask(fx: ThinLensFixture, grid, supersample=8):
    """Aperture transmission averaged over each field cell."""
    yy, xx = grid.coords()
    p = grid.pitch_mm
    half = fx.aperture / 2
    acc = torch.zeros_like(xx)
    offs = (torch.arange(supersample, dtype=DTYPE) + 0.5) / supersample - 0.5
    for oy in offs:
        for ox in offs:
            x = xx + ox * p
            y = yy + oy * p
            if fx.aperture_shape == "circle":
                acc += (x * x + y * y <= half * half).to(DTYPE)
            else:
                acc += ((x.abs() <= half) & (y.abs() <= half)).to(DTYPE)
    return acc / supersample**2


def oracle_psf(fixture: ThinLensFixture, wavelength=0.55, field=(0.0, 0.0), keep_field=False) -> PsfResult:
    """Scalar-diffraction PSF with no ray tracing.

    Aperture × exp(-jπr²/(λf)) × exp(jφλ) with a plane-wave tilt for
    off-axis fields, then angular spectrum propagation. Sensor placement,
    resampling and cropping match the ray-wave model exactly.
    """
    lens = fixture.lens()
    src = SourceSpec(field=field, wavelength=wavelength, spp=4)
    fgrid, landing, ok = place_source(lens, fixture.doe, src, fixture.grid)
    yy, xx = fgrid.coords()
    lam = wavelength * 1e-3
    amp = _aperture_mask(fixture, fgrid)
    d = src.direction()
    phase = -math.pi * (xx**2 + yy**2) / (lam * fixture.focal_length)
    phase = phase + 2 * math.pi / lam * (d[0] * xx + d[1] * yy)
    phase = phase + doe_phase(fixture.doe, fgrid, wavelength)
    u = ComplexField(torch.polar(amp, phase).to(CDTYPE), fgrid, wavelength)
    return field_to_psf(u, lens, fixture.grid, landing, ok, keep_field=keep_field)


def raywave_thinlens_psf(fixture: ThinLensFixture, wavelength=0.55, field=(0.0, 0.0), spp=100_000, seed=0, keep_field=False):
    src = SourceSpec(field=field, wavelength=wavelength, spp=spp)
    return compute_psf(fixture.lens(), fixture.doe, src, fixture.grid, seed=seed, keep_field=keep_field)


def trace_to_sensor(lens: LensSystem, doe: DoeProfile | None, source: SourceSpec, seed=0, sampling="jitter", distance=None):
    """Rays at the sensor plane with the DOE as a local grating (or absent)."""
    b = sample_source(source, lens, seed=seed, sampling=sampling)
    deflect = doe_deflector(doe) if doe is not None else None
    b = trace_surfaces(b, lens, 0, lens.doe_index + 1, doe_deflect=deflect)
    gap = lens.sensor_distance if distance is None else distance
    return propagate_rays_to_plane(b, lens.doe_z + gap)


def ray_histogram(bundle, lens: LensSystem, center, window):
    """Bilinear histogram of live ray hits on sensor pixels, cropped like a PSF."""
    live = bundle.valid
    row, col = sensor_coordinates(lens.sensor, bundle.o[live, 0].detach(), bundle.o[live, 1].detach())
    r0 = math.floor(center[0] + 0.5) - window // 2
    c0 = math.floor(center[1] + 0.5) - window // 2
    u = col - c0
    v = row - r0
    j = torch.floor(u).long()
    i = torch.floor(v).long()
    fu, fv = u - j, v - i
    img = torch.zeros(window * window, dtype=DTYPE)
    for di, dj, wt in ((0, 0, (1 - fv) * (1 - fu)), (0, 1, (1 - fv) * fu), (1, 0, fv * (1 - fu)), (1, 1, fv * fu)):
        ii, jj = i + di, j + dj
        ok = (ii >= 0) & (ii < window) & (jj >= 0) & (jj < window)
        img.index_add_(0, ii[ok] * window + jj[ok], wt[ok])
    return img.reshape(window, window)


def grating_ray_psf(fixture: ThinLensFixture, wavelength=0.55, field=(0.0, 0.0), spp=100_000, seed=0, center=None):
    """PSF of the grating-equation ray model: a histogram of deflected rays.

    Raises ModelInapplicableError when rays cross a phase discontinuity.
    """
    lens = fixture.lens()
    src = SourceSpec(field=field, wavelength=wavelength, spp=spp)
    b = trace_to_sensor(lens, fixture.doe, src, seed=seed)
    if center is None:
        _, landing, _ = place_source(lens, fixture.doe, src, fixture.grid)
        center = sensor_coordinates(lens.sensor, *landing)
    img = ray_histogram(b, lens, center, fixture.grid.psf_window)
    total = img.sum()
    if float(total) <= 0:
        raise SimulationError("no rays reached the PSF window")
    return img / total


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def ncc(a, b):
    """Zero-mean normalized cross-correlation (Pearson) of two arrays."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    return float(a @ b / math.sqrt((a @ a) * (b @ b)))


def relative_l2(a, ref):
    a = np.asarray(a, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    return float(np.linalg.norm(a - ref) / np.linalg.norm(ref))


def _np(t):
    return t.detach().numpy() if torch.is_tensor(t) else np.asarray(t)


def compare_fixture(fixture: ThinLensFixture, wavelength=0.55, spp=100_000, seed=0):
    """Oracle vs ray-wave vs grating-ray on one fixture.

    Returns a dict of metrics and the three patches (grating patch is None
    when the model is inapplicable).
    """
    oracle = oracle_psf(fixture, wavelength)
    rw = raywave_thinlens_psf(fixture, wavelength, spp=spp, seed=seed)
    o, r = _np(oracle.patch), _np(rw.patch)
    row = {
        "fixture": fixture.name,
        "raywave_ncc": ncc(r, o),
        "raywave_rel_l2": relative_l2(r, o),
        "grating_ncc": "inapplicable",
        "grating_rel_l2": "inapplicable",
    }
    g = None
    try:
        g = _np(grating_ray_psf(fixture, wavelength, spp=spp, seed=seed, center=oracle.center))
        row["grating_ncc"] = ncc(g, o)
        row["grating_rel_l2"] = relative_l2(g, o)
    except ModelInapplicableError:
        pass
    return row, {"oracle": o, "raywave": r, "grating": g}


def write_compare_csv(path, rows):
    keys = ["fixture", "raywave_ncc", "raywave_rel_l2", "grating_ncc", "grating_rel_l2"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in keys})


# ---------------------------------------------------------------------------
# Paraxial achromat
# ---------------------------------------------------------------------------


def paraxial_focus(lens: LensSystem, wavelength, doe: DoeProfile | None = None, height=0.02, depth=math.inf):
    """Axial distance behind the DOE plane where a near-axis marginal ray crosses the axis.

    ``height`` is the ray height on the first vertex plane as a fraction of
    the first semi-aperture; ``depth`` places an on-axis object point.
    """
    h = height * lens.surfaces[0].semi_aperture
    src = SourceSpec(wavelength=wavelength, spp=4, depth=depth)
    b = sample_source(src, lens, sampling="grid").select(slice(0, 1))
    if src.is_infinite:
        o = b.o.clone()
        o[0, 0], o[0, 1] = h, 0.0
        b = replace(b, o=o, opl=o @ b.d[0])
    else:
        d = torch.tensor([h, 0.0, 0.0], dtype=DTYPE) - b.o[0]
        b = replace(b, d=(d / torch.linalg.norm(d))[None])
    deflect = doe_deflector(doe) if doe is not None else None
    b = trace_surfaces(b, lens, 0, lens.doe_index + 1, doe_deflect=deflect)
    if not bool(b.valid.all()):
        raise SimulationError("paraxial ray lost before the DOE plane")
    x, dx, dz = float(b.o[0, 0]), float(b.d[0, 0]), float(b.d[0, 2])
    if dx == 0:
        return math.inf
    return -x * dz / dx


def focal_distances(lens: LensSystem, wavelengths, doe=None, depth=math.inf):
    return {float(l): paraxial_focus(lens, l, doe, depth=depth) for l in wavelengths}


def paraxial_achromat_doe(focal: dict, template: DoeProfile, design_wavelength=None, tol=1e-9) -> DoeProfile:
    """Fresnel-phase DOE cancelling the chromatic focal shift between the extreme wavelengths.

    ``focal`` maps wavelength (µm) to the focus distance (mm) behind the DOE
    plane. A kinoform of design power P0 has power P0·λ/λ0 at λ; equating
    the exit vergences 1/s_λ + P0·λ/λ0 at the shortest and longest
    wavelengths gives P0 = λ0 (s_R - s_B) / (s_R s_B (λ_R - λ_B)). The
    result is an even-radial profile with α1 = -π P0 R² / λ0; higher
    coefficients of an even template are kept at zero so the profile can
    seed an optimization of the same order.
    """
    if len(focal) < 2:
        raise ConfigurationError("need focal distances at two or more wavelengths")
    lam0 = template.design_wavelength if design_wavelength is None else design_wavelength
    k = len(template.coeffs) if template.kind == "even" and template.coeffs else 1
    lb, lr = min(focal), max(focal)
    sb, sr = focal[lb], focal[lr]
    if abs(sr - sb) <= tol * max(abs(sr), abs(sb)):
        return replace(template, kind="even", coeffs=(0.0,) * k, phase=None, levels=None, design_wavelength=lam0)
    p0 = lam0 * (sr - sb) / (sr * sb * (lr - lb))  # 1/mm
    alpha1 = -math.pi * p0 * template.half_diagonal**2 / (lam0 * 1e-3)
    return replace(template, kind="even", coeffs=(alpha1,) + (0.0,) * (k - 1), phase=None, levels=None, design_wavelength=lam0)

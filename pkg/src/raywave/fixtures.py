"""Desk-scale fixtures shared by the tests, demos and CLI recipes.

The bundled prescriptions (``singlet``, ``doublet``, ``asphere``) are built
here and also shipped as JSON under ``raywave/data/lenses``; the DOE planes
are placed by tracing the paraxial focus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .doe import FUSED_SILICA, DoeProfile
from .geometry import AIR, LensSystem, Material, SensorSpec, SurfaceSpec
from .psf import GridConfig
from .reference import paraxial_focus

BK7 = Material("bk7_cauchy", "cauchy", (1.5046, 0.00420))
F2 = Material("f2_cauchy", "cauchy", (1.5996, 0.01080))

DEPTHS_EDOF = (200.0, 300.0, 10_000.0)  # mm
# Dioptric midpoint of the nearest and farthest EDoF depths.
FOCUS_DEPTH_EDOF = 2.0 / (1.0 / DEPTHS_EDOF[0] + 1.0 / DEPTHS_EDOF[-1])


def move_doe(lens: LensSystem, gap: float) -> LensSystem:
    """Place the DOE ``gap`` mm in front of the sensor, keeping the sensor fixed."""
    i = lens.doe_index
    total = lens.surfaces[i - 1].thickness + lens.surfaces[i].thickness
    if not 0 < gap < total:
        raise ValueError(f"gap {gap} outside (0, {total})")
    s = list(lens.surfaces)
    s[i - 1] = replace(s[i - 1], thickness=total - gap)
    s[i] = replace(s[i], thickness=gap)
    return replace(lens, surfaces=tuple(s))


def refocus(lens: LensSystem, wavelength=0.55, doe=None, depth=math.inf) -> LensSystem:
    """Move the sensor to the paraxial focus at ``wavelength``."""
    return lens.with_sensor_distance(paraxial_focus(lens, wavelength, doe, depth=depth))


def focus_on(lens: LensSystem, gap: float, wavelength=0.55, depth=math.inf) -> LensSystem:
    """Put the DOE ``gap`` mm before the paraxial focus and the sensor at that focus."""
    i = lens.doe_index
    s = list(lens.surfaces)
    probe = replace(lens, surfaces=tuple(s[: i - 1] + [replace(s[i - 1], thickness=1e-3)] + s[i:]))
    back = paraxial_focus(probe, wavelength, depth=depth) + 1e-3
    s[i - 1] = replace(s[i - 1], thickness=back - gap)
    s[i] = replace(s[i], thickness=gap)
    return replace(lens, surfaces=tuple(s))


def _design_singlet():
    r = 51.85
    surfaces = (
        SurfaceSpec("stop", 2.5),
        SurfaceSpec("refractive", 3.0, thickness=3.0, material=BK7, curvature=1 / r),
        SurfaceSpec("refractive", 3.0, thickness=30.0, curvature=-1 / r),
        SurfaceSpec("doe-plane", 4.0, thickness=20.0, aperture_shape="square"),
        SurfaceSpec("sensor", 4.0, aperture_shape="square"),
    )
    lens = LensSystem(surfaces, SensorSpec((2000, 2000), 4.0, 0.01), "singlet")
    return focus_on(lens, 20.0)


def _design_doublet():
    surfaces = (
        SurfaceSpec("stop", 2.5),
        SurfaceSpec("refractive", 4.0, thickness=4.0, material=BK7, curvature=1 / 22.35),
        SurfaceSpec("refractive", 4.0, thickness=2.0, material=F2, curvature=-1 / 22.35),
        SurfaceSpec("refractive", 4.0, thickness=40.0, curvature=-1 / 463.0),
        SurfaceSpec("doe-plane", 4.0, thickness=5.0, aperture_shape="square"),
        SurfaceSpec("sensor", 4.0, aperture_shape="square"),
    )
    lens = LensSystem(surfaces, SensorSpec((2000, 2000), 4.0, 0.01), "doublet")
    return focus_on(lens, 5.0)


def _design_asphere():
    r = 20.7
    surfaces = (
        SurfaceSpec("stop", 1.0),
        SurfaceSpec("refractive", 2.0, thickness=2.0, material=BK7, curvature=1 / r, conic=-0.5, asphere=(-1e-5,)),
        SurfaceSpec("refractive", 2.0, thickness=15.0, curvature=-1 / r),
        SurfaceSpec("doe-plane", 1.0, thickness=4.0, aperture_shape="square"),
        SurfaceSpec("sensor", 2.0, aperture_shape="square"),
    )
    lens = LensSystem(surfaces, SensorSpec((512, 512), 4.0, 0.01), "asphere")
    # Focus at the dioptric midpoint of the EDoF depth range.
    return focus_on(lens, 4.0, depth=FOCUS_DEPTH_EDOF)


DESIGNS = {"singlet": _design_singlet, "doublet": _design_doublet, "asphere": _design_asphere}


def design_lens(name: str) -> LensSystem:
    return DESIGNS[name]()


# ---------------------------------------------------------------------------
# Scenario bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Scenario:
    lens: LensSystem
    doe: DoeProfile
    grid: GridConfig
    fovs: tuple
    wavelengths: tuple
    depths: tuple = (math.inf,)
    spp: int = 100_000


def singlet_scenario(kind="even", k=4):
    """Singlet achromat at F/10: DOE 20 mm before focus, 8×8 mm with 4 µm cells.

    The beam is about 2 mm wide at the DOE, so the field is sampled at the
    sensor pitch over a 2.56 mm window, with a regular pupil grid of about
    one ray per field cell.
    """
    from .psf import rgb_wavelengths

    lens = design_lens("singlet")
    doe = DoeProfile(kind=kind, coeffs=(0.0,) * k, size=(8.0, 8.0), feature_size=4.0, substrate=FUSED_SILICA)
    grid = GridConfig(field_pitch=4.0, field_window=640, psf_window=64, sampling="grid")
    fovs = ((0.0, 0.0), (0.0, 2.8), (0.0, 4.0))
    return Scenario(lens, doe, grid, fovs, tuple(rgb_wavelengths()), spp=250_000)


def edof_scenario(k=7):
    """Asphere, f ≈ 20 mm F/10, DOE 4 mm before the sensor, three object depths."""
    lens = design_lens("asphere")
    doe = DoeProfile(kind="full", coeffs=(0.0,) * (k - 1), size=(0.512, 0.512), feature_size=4.0)
    grid = GridConfig(field_pitch=2.0, field_window=256, psf_window=64)
    return Scenario(lens, doe, grid, ((0.0, 0.0),), (0.55,), DEPTHS_EDOF, 100_000)


def gradient_scenario(kind="even"):
    """Small fixture for finite-difference checks: 64² field, spp = 10⁴.

    The asphere with its DOE 1 mm before the sensor, where the beam from an
    object at the focused depth is about 0.1 mm across.
    """
    lens = move_doe(design_lens("asphere"), 1.0)
    lens = replace(lens, sensor=SensorSpec((512, 512), 2.0, 0.01))
    if kind == "even":
        coeffs = (3.0, -2.0, 1.5, 0.5)
    else:
        coeffs = (3.0, 1.0, -2.0, 0.7, 1.2, -0.4)
    doe = DoeProfile(kind=kind, coeffs=coeffs, size=(0.128, 0.128), feature_size=2.0)
    grid = GridConfig(field_pitch=2.0, field_window=64, psf_window=32)
    return Scenario(lens, doe, grid, ((0.0, 0.0),), (0.55,), (FOCUS_DEPTH_EDOF,), 10_000)

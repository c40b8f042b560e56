"""Lens prescriptions: materials, surfaces, sensors and their JSON form.

Units are fixed throughout the package: millimeters for geometry, micrometers
for wavelengths and pixel pitches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import torch

from .errors import ConfigurationError, MaterialError

DTYPE = torch.float64

SURFACE_KINDS = ("refractive", "stop", "doe-plane", "sensor", "ideal-lens")
DISPERSION_MODELS = ("constant", "cauchy", "sellmeier")
MAX_ASPHERE_TERMS = 5  # a4, a6, a8, a10, a12


@dataclass(frozen=True)
class Material:
    """Dispersive medium.

    ``coeffs`` depend on ``model``:

    * ``constant``: ``(n,)``
    * ``cauchy``: ``(A, B[, C])`` with n = A + B/λ² + C/λ⁴, λ in µm
    * ``sellmeier``: ``(B1, B2, B3, C1, C2, C3)`` with C in µm²
    """

    name: str
    model: str = "constant"
    coeffs: tuple = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if self.model not in DISPERSION_MODELS:
            raise ConfigurationError(
                f"material {self.name!r}: unknown dispersion model {self.model!r}"
            )
        expected = {"constant": (1,), "cauchy": (2, 3), "sellmeier": (6,)}[self.model]
        if len(self.coeffs) not in expected:
            raise ConfigurationError(
                f"material {self.name!r}: model {self.model} takes "
                f"{' or '.join(map(str, expected))} coefficients, got {len(self.coeffs)}"
            )

    def to_dict(self):
        return {"name": self.name, "model": self.model, "coeffs": list(self.coeffs)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d.get("model", "constant"), tuple(d.get("coeffs", (1.0,))))


AIR = Material("air", "constant", (1.0,))


def refractive_index(material: Material, wavelength: float) -> float:
    """Refractive index of ``material`` at ``wavelength`` (µm)."""
    wavelength = float(wavelength)
    if not 0.3 <= wavelength <= 1.0:
        raise ConfigurationError(f"wavelength {wavelength} µm outside [0.3, 1.0]")
    c = material.coeffs
    if material.model == "constant":
        n = c[0]
    elif material.model == "cauchy":
        w2 = wavelength**2
        n = c[0] + c[1] / w2 + (c[2] / w2**2 if len(c) > 2 else 0.0)
    elif material.model == "sellmeier":
        w2 = wavelength**2
        n2 = 1.0 + sum(b * w2 / (w2 - cc) for b, cc in zip(c[:3], c[3:]))
        if n2 <= 0:
            raise MaterialError(f"{material.name}: Sellmeier n² = {n2} at {wavelength} µm")
        n = math.sqrt(n2)
    else:  # pragma: no cover - guarded in __post_init__
        raise ConfigurationError(f"unknown dispersion model {material.model!r}")
    if not math.isfinite(n):
        raise MaterialError(f"{material.name}: non-finite index at {wavelength} µm")
    return n


@dataclass(frozen=True)
class SurfaceSpec:
    """One element of a sequential prescription.

    ``thickness`` is the axial distance to the next surface and ``material`` the
    medium that follows this surface. ``asphere`` holds the even coefficients
    a4..a12 (mm^(1-i)). ``focal_length`` is only used by ``ideal-lens``.
    """

    kind: str
    semi_aperture: float
    thickness: float = 0.0
    material: Material = AIR
    curvature: float = 0.0
    conic: float = 0.0
    asphere: tuple = ()
    aperture_shape: str = "circle"
    focal_length: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "asphere", tuple(float(a) for a in self.asphere))
        if self.kind not in SURFACE_KINDS:
            raise ConfigurationError(f"unknown surface kind {self.kind!r}")
        if not self.semi_aperture > 0:
            raise ConfigurationError(f"{self.kind}: semi_aperture must be > 0")
        if self.aperture_shape not in ("circle", "square"):
            raise ConfigurationError(f"unknown aperture shape {self.aperture_shape!r}")
        if len(self.asphere) > MAX_ASPHERE_TERMS:
            raise ConfigurationError(
                f"asphere terms beyond r^12 are not supported ({len(self.asphere)} given)"
            )
        if self.kind == "ideal-lens" and not self.focal_length:
            raise ConfigurationError("ideal-lens needs a non-zero focal_length")
        if self.thickness < 0 or (self.kind == "refractive" and self.thickness <= 0):
            raise ConfigurationError(f"{self.kind}: invalid thickness {self.thickness}")
        # Sag must stay real across the clear aperture.
        r2max = 2 * self.semi_aperture**2 if self.aperture_shape == "square" else self.semi_aperture**2
        if 1.0 - (1.0 + self.conic) * self.curvature**2 * r2max < 0:
            raise ConfigurationError(
                f"{self.kind}: conic sag is complex inside the aperture "
                f"(c={self.curvature}, k={self.conic}, r={math.sqrt(r2max):.4g})"
            )

    def to_dict(self):
        d = {
            "kind": self.kind,
            "semi_aperture": self.semi_aperture,
            "thickness": self.thickness,
            "material": self.material.to_dict(),
        }
        if self.curvature:
            d["curvature"] = self.curvature
        if self.conic:
            d["conic"] = self.conic
        if self.asphere:
            d["asphere"] = list(self.asphere)
        if self.aperture_shape != "circle":
            d["aperture_shape"] = self.aperture_shape
        if self.focal_length is not None:
            d["focal_length"] = self.focal_length
        return d

    @classmethod
    def from_dict(cls, d):
        known = {
            "kind", "semi_aperture", "thickness", "material", "curvature",
            "conic", "asphere", "aperture_shape", "focal_length",
        }
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown surface fields: {sorted(extra)}")
        kw = dict(d)
        kw["material"] = Material.from_dict(d["material"]) if "material" in d else AIR
        kw["asphere"] = tuple(d.get("asphere", ()))
        return cls(**kw)


@dataclass(frozen=True)
class SensorSpec:
    resolution: tuple = (2000, 2000)  # (H, W) pixels
    pixel_pitch: float = 4.0  # µm
    noise_sigma: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        if len(self.resolution) != 2 or min(self.resolution) <= 0:
            raise ConfigurationError(f"bad sensor resolution {self.resolution}")
        if not self.pixel_pitch > 0:
            raise ConfigurationError("sensor pixel_pitch must be > 0")

    @property
    def size_mm(self):
        h, w = self.resolution
        return (h * self.pixel_pitch * 1e-3, w * self.pixel_pitch * 1e-3)

    def to_dict(self):
        return {
            "resolution": list(self.resolution),
            "pixel_pitch_um": self.pixel_pitch,
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["resolution"]), d["pixel_pitch_um"], d.get("noise_sigma", 0.01))


@dataclass(frozen=True)
class LensSystem:
    """Ordered surfaces starting at z = 0 and ending with the sensor."""

    surfaces: tuple
    sensor: SensorSpec = field(default_factory=SensorSpec)
    name: str = "lens"

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        kinds = [s.kind for s in self.surfaces]
        if not kinds or kinds[-1] != "sensor" or kinds.count("sensor") != 1:
            raise ConfigurationError("prescription must end with exactly one sensor surface")
        if kinds.count("stop") != 1:
            raise ConfigurationError(f"exactly one stop required, found {kinds.count('stop')}")
        if kinds.count("doe-plane") != 1:
            raise ConfigurationError(
                f"exactly one doe-plane required, found {kinds.count('doe-plane')}"
            )
        doe = kinds.index("doe-plane")
        powered = [i for i, k in enumerate(kinds) if k in ("refractive", "ideal-lens")]
        if powered and doe < max(powered):
            raise ConfigurationError("the DOE plane must follow the last powered surface")
        if self.surfaces[doe].thickness <= 0:
            raise ConfigurationError("the DOE plane must sit in front of the sensor")

    @property
    def doe_index(self):
        return [s.kind for s in self.surfaces].index("doe-plane")

    @property
    def stop_index(self):
        return [s.kind for s in self.surfaces].index("stop")

    @property
    def z_positions(self):
        z, out = 0.0, []
        for s in self.surfaces:
            out.append(z)
            z += s.thickness
        return tuple(out)

    @property
    def doe_z(self):
        return self.z_positions[self.doe_index]

    @property
    def sensor_distance(self):
        """Axial gap between the DOE plane and the sensor, mm."""
        return self.surfaces[self.doe_index].thickness

    def with_sensor_distance(self, distance):
        surfaces = list(self.surfaces)
        surfaces[self.doe_index] = replace(surfaces[self.doe_index], thickness=float(distance))
        return replace(self, surfaces=tuple(surfaces))

    def medium_before(self, index):
        return AIR if index == 0 else self.surfaces[index - 1].material

    def to_dict(self):
        return {
            "name": self.name,
            "sensor": self.sensor.to_dict(),
            "surfaces": [s.to_dict() for s in self.surfaces],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            surfaces = tuple(SurfaceSpec.from_dict(s) for s in d["surfaces"])
            sensor = SensorSpec.from_dict(d["sensor"])
        except KeyError as exc:
            raise ConfigurationError(f"lens file missing field {exc}") from None
        return cls(surfaces, sensor, d.get("name", "lens"))


def load_lens(path) -> LensSystem:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"lens file not found: {path}")
    with open(path) as f:
        return LensSystem.from_dict(json.load(f))


def save_lens(lens: LensSystem, path):
    with open(path, "w") as f:
        json.dump(lens.to_dict(), f, indent=2)
        f.write("\n")


def fixture_lens(name: str) -> LensSystem:
    """Load one of the bundled desk-scale prescriptions (singlet, doublet, asphere)."""
    ref = resources.files("raywave") / "data" / "lenses" / f"{name}.json"
    if not ref.is_file():
        raise ConfigurationError(f"no bundled lens named {name!r}")
    return LensSystem.from_dict(json.loads(ref.read_text()))


# ---------------------------------------------------------------------------
# Surface shape
# ---------------------------------------------------------------------------


def _as_tensor(v):
    return v if torch.is_tensor(v) else torch.as_tensor(v, dtype=DTYPE)


def _radicand(surface, r2):
    return 1.0 - (1.0 + surface.conic) * surface.curvature**2 * r2


def surface_sag(surface: SurfaceSpec, x, y):
    """Sag z(x, y) in mm relative to the surface vertex.

    Points where the conic radicand goes negative are clamped; the tracer marks
    such rays invalid rather than raising here.
    """
    x, y = _as_tensor(x), _as_tensor(y)
    r2 = x * x + y * y
    c = surface.curvature
    z = torch.zeros_like(r2)
    if c:
        s = torch.sqrt(torch.clamp(_radicand(surface, r2), min=0.0))
        z = c * r2 / (1.0 + s)
    for i, a in enumerate(surface.asphere, start=2):
        if a:
            z = z + a * r2**i
    return z


def _dsag_dr2(surface, r2):
    c = surface.curvature
    g = torch.zeros_like(r2)
    if c:
        s = torch.sqrt(torch.clamp(_radicand(surface, r2), min=1e-300))
        g = 0.5 * c / s
    for i, a in enumerate(surface.asphere, start=2):
        if a:
            g = g + i * a * r2 ** (i - 1)
    return g


def sag_gradient(surface: SurfaceSpec, x, y):
    """Partial derivatives (dz/dx, dz/dy) of the sag."""
    x, y = _as_tensor(x), _as_tensor(y)
    g = 2.0 * _dsag_dr2(surface, x * x + y * y)
    return g * x, g * y


def surface_normal(surface: SurfaceSpec, x, y):
    """Unit normal (..., 3) oriented towards +z."""
    zx, zy = sag_gradient(surface, x, y)
    n = torch.stack([-zx, -zy, torch.ones_like(zx)], dim=-1)
    return n / torch.linalg.norm(n, dim=-1, keepdim=True)


def in_aperture(surface: SurfaceSpec, x, y):
    a = surface.semi_aperture
    if surface.aperture_shape == "square":
        return (x.abs() <= a) & (y.abs() <= a)
    return x * x + y * y <= a * a

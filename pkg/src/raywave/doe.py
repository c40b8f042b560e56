"""Diffractive optical element: phase parameterizations and field modulation.

The DOE is stored as its phase φ0 at the design wavelength λ0. At another
wavelength the same relief imposes

    φλ = (n(λ) - 1) / (n(λ0) - 1) · λ0 / λ · φ0

and the relief height is h = λ0 φ0 / (2π (n(λ0) - 1)).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import ConfigurationError, MaterialError
from .geometry import DTYPE, Material, refractive_index
from .wavefield import ComplexField, FieldGrid

TWO_PI = 2 * math.pi

# Malitson's fused silica Sellmeier fit.
FUSED_SILICA = Material(
    "fused_silica",
    "sellmeier",
    (0.6961663, 0.4079426, 0.8974794, 0.0684043**2, 0.1162414**2, 9.896161**2),
)

KINDS = ("even", "full", "pixel")


@dataclass(frozen=True)
class DoeProfile:
    """Phase profile at the design wavelength.

    kind:
        ``even``  φ0 = Σ_{i=1..k} coeffs[i-1] · ρ^(2i)
        ``full``  φ0 = Σ_{i=2..k} coeffs[i-2] · ρ^i  (odd and even powers)
        ``pixel`` φ0 given per native pixel in ``phase`` (H×W, radians)

    ρ is the radius normalized by the half-diagonal of the (rectangular) DOE,
    so ρ = 1 at the corners. ``coeffs`` and ``phase`` may be tensors that
    require grad. ``wrap`` folds the relief into one 2π depth at λ0, which
    is what a fabricated kinoform does and what gives the element its
    diffractive dispersion.
    """

    kind: str = "even"
    coeffs: object = ()
    phase: object = None
    design_wavelength: float = 0.55
    substrate: Material = FUSED_SILICA
    size: tuple = (8.0, 8.0)  # (height, width) mm
    feature_size: float = 4.0  # µm
    levels: int | None = None
    wrap: bool = True
    center: tuple = field(default=(0.0, 0.0))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown DOE kind {self.kind!r}")
        size = (self.size, self.size) if np.isscalar(self.size) else tuple(self.size)
        object.__setattr__(self, "size", tuple(float(s) for s in size))
        if self.kind == "pixel":
            if self.phase is None:
                raise ConfigurationError("pixel DOE needs a phase grid")
            ph = self.phase if torch.is_tensor(self.phase) else torch.as_tensor(np.asarray(self.phase), dtype=DTYPE)
            object.__setattr__(self, "phase", ph)
            want = self.native_shape
            if tuple(ph.shape) != want:
                raise ConfigurationError(
                    f"pixel DOE grid {tuple(ph.shape)} != size/feature_size {want}"
                )
        elif not torch.is_tensor(self.coeffs):
            object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))
        if self.levels is not None and self.levels < 2:
            raise ConfigurationError("quantization needs at least 2 levels")

    @property
    def native_shape(self):
        f = self.feature_size * 1e-3
        shape = tuple(int(round(s / f)) for s in self.size)
        for s, n in zip(self.size, shape):
            if abs(n * f - s) > 1e-9:
                raise ConfigurationError(f"DOE size {s} mm is not a multiple of {self.feature_size} µm")
        return shape

    @property
    def half_diagonal(self):
        return 0.5 * math.hypot(*self.size)

    @property
    def differentiable(self):
        return self.levels is None

    def native_coords(self):
        """Pixel-center coordinates (Y, X) in mm of the native grid."""
        h, w = self.native_shape
        f = self.feature_size * 1e-3
        y = self.center[1] + (torch.arange(h, dtype=DTYPE) - (h - 1) / 2) * f
        x = self.center[0] + (torch.arange(w, dtype=DTYPE) - (w - 1) / 2) * f
        return torch.meshgrid(y, x, indexing="ij")

    def coefficient_tensor(self):
        return torch.as_tensor(self.coeffs, dtype=DTYPE) if not torch.is_tensor(self.coeffs) else self.coeffs

    def with_coeffs(self, coeffs):
        return replace(self, coeffs=coeffs)

    def to_dict(self):
        d = {
            "kind": self.kind,
            "design_wavelength_um": self.design_wavelength,
            "substrate": self.substrate.to_dict(),
            "size_mm": list(self.size),
            "feature_size_um": self.feature_size,
            "levels": self.levels,
            "wrap": self.wrap,
            "center_mm": list(self.center),
        }
        if self.kind == "pixel":
            d["phase"] = np.asarray(self.phase.detach()).tolist()
        else:
            d["coeffs"] = [float(c) for c in self.coefficient_tensor().detach()]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            coeffs=tuple(d.get("coeffs", ())),
            phase=np.asarray(d["phase"], dtype=np.float64) if "phase" in d else None,
            design_wavelength=d.get("design_wavelength_um", 0.55),
            substrate=Material.from_dict(d["substrate"]) if "substrate" in d else FUSED_SILICA,
            size=tuple(d.get("size_mm", (8.0, 8.0))),
            feature_size=d.get("feature_size_um", 4.0),
            levels=d.get("levels"),
            wrap=d.get("wrap", True),
            center=tuple(d.get("center_mm", (0.0, 0.0))),
        )

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def zero_doe(**kw):
    return DoeProfile(kind="even", coeffs=(0.0,), **kw)


def load_doe(path):
    from pathlib import Path

    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"DOE file not found: {p}")
    return DoeProfile.from_dict(json.loads(p.read_text()))


def save_doe(doe, path):
    with open(path, "w") as f:
        json.dump(doe.to_dict(), f, indent=1)
        f.write("\n")


def polynomial_phase(doe: DoeProfile, x, y):
    """φ0 of a polynomial profile at arbitrary points (mm)."""
    c = doe.coefficient_tensor()
    r2 = (x - doe.center[0]) ** 2 + (y - doe.center[1]) ** 2
    rho2 = r2 / doe.half_diagonal**2
    phi = torch.zeros_like(rho2)
    if doe.kind == "even":
        p = torch.ones_like(rho2)
        for a in c:
            p = p * rho2
            phi = phi + a * p
    else:
        rho = torch.sqrt(rho2)
        for i, b in enumerate(c, start=2):
            phi = phi + b * rho**i
    return phi


def polynomial_phase_gradient(doe: DoeProfile, x, y):
    """(∂φ0/∂x, ∂φ0/∂y) in rad/mm for polynomial profiles."""
    c = doe.coefficient_tensor()
    dx, dy = x - doe.center[0], y - doe.center[1]
    big_r2 = doe.half_diagonal**2
    rho2 = (dx * dx + dy * dy) / big_r2
    g = torch.zeros_like(rho2)  # (1/r) dφ/dr · R², i.e. Σ p c ρ^(p-2)
    if doe.kind == "even":
        p = torch.ones_like(rho2)
        for i, a in enumerate(c, start=1):
            g = g + 2 * i * a * p
            p = p * rho2
    else:
        rho = torch.sqrt(rho2)
        for i, b in enumerate(c, start=2):
            g = g + i * b * rho ** (i - 2)
    g = g / big_r2
    return g * dx, g * dy


def _check_inside(doe, grid, tol=1e-9):
    hh, hw = grid.extent[0] / 2, grid.extent[1] / 2
    dh, dw = doe.size[0] / 2, doe.size[1] / 2
    cx, cy = grid.center[0] - doe.center[0], grid.center[1] - doe.center[1]
    if cx - hw < -dw - tol or cx + hw > dw + tol or cy - hh < -dh - tol or cy + hh > dh + tol:
        raise ConfigurationError(
            f"field window {grid.extent} mm at {grid.center} exceeds the DOE extent {doe.size} mm"
        )


def _upsample_indices(doe, grid):
    m = doe.feature_size / grid.pitch
    mi = int(round(m))
    if mi < 1 or abs(m - mi) > 1e-9:
        raise ConfigurationError(
            f"field pitch {grid.pitch} µm must divide the DOE feature size {doe.feature_size} µm"
        )
    h, w = doe.native_shape
    idx = []
    for axis, (n, c_g, c_d, size) in enumerate(
        ((grid.shape[1], grid.center[0], doe.center[0], doe.size[1]),
         (grid.shape[0], grid.center[1], doe.center[1], doe.size[0]))
    ):
        left = (c_g - n * grid.pitch_mm / 2) - (c_d - size / 2)
        off = left / grid.pitch_mm
        offi = int(round(off))
        if abs(off - offi) > 1e-6:
            raise ConfigurationError("field grid is not aligned with the DOE pixel grid")
        idx.append((offi + torch.arange(n)) // mi)
    return idx[1], idx[0]


def phase_at_design(doe: DoeProfile, grid: FieldGrid):
    """φ0 sampled on ``grid`` (radians).

    Polynomial forms are evaluated exactly at the sample points; pixel-wise
    maps are upsampled by nearest-neighbour replication, so their steps are
    preserved.
    """
    _check_inside(doe, grid)
    if doe.kind == "pixel":
        rows, cols = _upsample_indices(doe, grid)
        return doe.phase[rows][:, cols]
    yy, xx = grid.coords()
    return polynomial_phase(doe, xx, yy)


def index_ratio(substrate: Material, wavelength, design_wavelength):
    n = refractive_index(substrate, wavelength)
    n0 = refractive_index(substrate, design_wavelength)
    if n <= 1.0 or n0 <= 1.0:
        raise MaterialError(f"{substrate.name}: index {min(n, n0):.4f} <= 1")
    return (n - 1.0) / (n0 - 1.0)


def remap_phase(phi0, wavelength, substrate: Material, design_wavelength=0.55):
    """Phase imposed at ``wavelength`` by a relief designed for ``design_wavelength``."""
    if wavelength == design_wavelength:
        return phi0
    scale = index_ratio(substrate, wavelength, design_wavelength) * design_wavelength / wavelength
    return phi0 * scale


def wrap_phase(phi):
    return torch.remainder(phi, TWO_PI)


def doe_phase(doe: DoeProfile, grid: FieldGrid, wavelength):
    phi0 = phase_at_design(doe, grid)
    if doe.wrap and doe.kind != "pixel":
        phi0 = wrap_phase(phi0)
    return remap_phase(phi0, wavelength, doe.substrate, doe.design_wavelength)


def modulate(field: ComplexField, doe: DoeProfile, wavelength=None) -> ComplexField:
    """U+ = U- · exp(j φλ). Pure phase, so |U+| = |U-| sample by sample."""
    if wavelength is not None and abs(wavelength - field.wavelength) > 1e-12:
        raise ConfigurationError(
            f"field wavelength {field.wavelength} µm != requested {wavelength} µm"
        )
    phi = doe_phase(doe, field.grid, field.wavelength)
    t = torch.polar(torch.ones_like(phi), phi)
    return replace(field, data=field.data * t)


def native_phase(doe: DoeProfile):
    """φ0 on the native pixel grid (unwrapped for polynomial forms)."""
    if doe.kind == "pixel":
        return doe.phase
    yy, xx = doe.native_coords()
    return polynomial_phase(doe, xx, yy)


def height_map(doe: DoeProfile):
    """Relief height (µm) on the native pixel grid, without wrapping."""
    n0 = refractive_index(doe.substrate, doe.design_wavelength)
    return doe.design_wavelength * native_phase(doe) / (TWO_PI * (n0 - 1.0))


def from_height_map(height, template: DoeProfile) -> DoeProfile:
    """Pixel-wise profile whose relief is ``height`` (µm)."""
    n0 = refractive_index(template.substrate, template.design_wavelength)
    h = height if torch.is_tensor(height) else torch.as_tensor(np.asarray(height), dtype=DTYPE)
    phi = TWO_PI * (n0 - 1.0) * h / template.design_wavelength
    return replace(template, kind="pixel", coeffs=(), phase=phi, levels=None)


def quantize(doe: DoeProfile, levels: int) -> DoeProfile:
    """Wrap φ0 into [0, 2π) and snap to ``levels`` uniform steps.

    The result is pixel-wise; the largest phase error (mod 2π) is π/levels.
    """
    if levels < 2:
        raise ConfigurationError(f"quantization needs at least 2 levels, got {levels}")
    phi = native_phase(doe).detach()
    step = TWO_PI / levels
    k = torch.round(wrap_phase(phi) / step) % levels
    return replace(doe, kind="pixel", coeffs=(), phase=k * step, levels=levels)


def level_indices(doe: DoeProfile):
    """Integer level per native pixel of a quantized profile (for mask export)."""
    if doe.levels is None:
        raise ConfigurationError("profile is not quantized")
    step = TWO_PI / doe.levels
    return (torch.round(doe.phase / step) % doe.levels).to(torch.int64).numpy()

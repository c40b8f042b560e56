"""Coherent sequential ray tracing.

Rays carry their optical path length (OPL) so that a bundle can later be
superposed into a complex field. All arithmetic is float64: the phase of a
ray after ~100 mm of glass and air is ~1e6 rad and single precision would
lose it entirely.
"""

from __future__ import annotations

import csv
import math
import warnings
import zlib
from dataclasses import dataclass, replace
from enum import IntEnum

import numpy as np
import torch

from .errors import ConfigurationError, ResourceError, SimulationError
from .geometry import (
    DTYPE,
    LensSystem,
    SurfaceSpec,
    in_aperture,
    refractive_index,
    sag_gradient,
    surface_normal,
    surface_sag,
)

NEWTON_TOL = 1e-10  # mm, axial residual
NEWTON_MAXITER = 32
BYTES_PER_RAY = 512  # generous: tensors plus temporaries during a trace
MEMORY_BUDGET_BYTES = 4 * 1024**3


class Invalid(IntEnum):
    """Reason codes carried by dead rays."""

    OK = 0
    APERTURE = 1
    TIR = 2
    DIVERGENCE = 3


@dataclass
class RayBundle:
    o: torch.Tensor  # (N, 3) mm
    d: torch.Tensor  # (N, 3) unit
    opl: torch.Tensor  # (N,) mm
    amp: torch.Tensor  # (N,)
    wavelength: float  # µm
    reason: torch.Tensor  # (N,) int8, Invalid codes

    @property
    def valid(self):
        return self.reason == Invalid.OK

    @property
    def spp(self):
        return self.o.shape[0]

    def kill(self, mask, why):
        reason = self.reason.clone()
        reason[mask & (reason == Invalid.OK)] = int(why)
        return replace(self, reason=reason)

    def select(self, idx):
        return RayBundle(
            self.o[idx], self.d[idx], self.opl[idx], self.amp[idx], self.wavelength, self.reason[idx]
        )


@dataclass(frozen=True)
class SourceSpec:
    """A coherent point source.

    ``field`` is the (x, y) field angle in degrees. With ``depth = inf`` the
    source emits a plane wave; otherwise it sits at axial distance ``depth`` mm
    in front of the first vertex, along the field direction. ``point`` overrides
    both with an explicit object point (x, y, z) in mm.
    """

    field: tuple = (0.0, 0.0)
    depth: float = math.inf
    wavelength: float = 0.55
    spp: int = 10_000
    point: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "field", tuple(float(v) for v in self.field))
        if self.spp < 4:
            raise ConfigurationError(f"spp must be >= 4, got {self.spp}")
        if self.point is None and not self.depth > 0:
            raise ConfigurationError(f"source depth must be > 0, got {self.depth}")

    @property
    def is_infinite(self):
        return self.point is None and math.isinf(self.depth)

    def object_point(self):
        if self.point is not None:
            return tuple(float(v) for v in self.point)
        tx, ty = (math.tan(math.radians(a)) for a in self.field)
        return (self.depth * tx, self.depth * ty, -self.depth)

    def direction(self):
        tx, ty = (math.tan(math.radians(a)) for a in self.field)
        n = math.sqrt(tx * tx + ty * ty + 1.0)
        return (tx / n, ty / n, 1.0 / n)

    def key(self):
        """Stable integer derived from the source, used to seed pupil jitter."""
        text = repr((self.field, self.depth, self.wavelength, self.spp, self.point))
        return zlib.crc32(text.encode())


def _pupil_grid(n, half, sampling, rng):
    if sampling == "random":
        u = rng.random((n * n, 2))
        return (2 * u - 1) * half
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    if sampling == "jitter":
        off = rng.random((2, n, n))
    elif sampling == "grid":
        off = np.full((2, n, n), 0.5)
    else:
        raise ConfigurationError(f"unknown pupil sampling {sampling!r}")
    x = ((j + off[0]) / n * 2 - 1) * half
    y = ((i + off[1]) / n * 2 - 1) * half
    return np.stack([x.ravel(), y.ravel()], axis=-1)


def sample_source(source: SourceSpec, lens: LensSystem, seed=0, sampling="jitter") -> RayBundle:
    """Launch ``ceil(sqrt(spp))**2`` rays filling the first surface's aperture.

    Pupil points lie on the z = 0 plane (first vertex). Plane-wave rays start
    with OPL equal to their distance from the plane through the origin normal
    to the propagation direction; rays from a finite point start at the point
    with OPL 0.
    """
    n = math.ceil(math.sqrt(source.spp))
    need = n * n * BYTES_PER_RAY
    if need > MEMORY_BUDGET_BYTES:
        raise ResourceError(
            f"{n * n} rays need ~{need / 2**30:.2f} GiB, budget is "
            f"{MEMORY_BUDGET_BYTES / 2**30:.2f} GiB",
            required_bytes=need,
        )
    rng = np.random.default_rng([int(seed), source.key()])
    first = lens.surfaces[0]
    xy = torch.as_tensor(_pupil_grid(n, first.semi_aperture, sampling, rng), dtype=DTYPE)
    pupil = torch.cat([xy, torch.zeros(len(xy), 1, dtype=DTYPE)], dim=1)
    count = len(pupil)
    if source.is_infinite:
        d = torch.tensor(source.direction(), dtype=DTYPE).expand(count, 3).clone()
        # Back off in front of the first surface so that concave fronts are reachable.
        back = 1.0 + abs(float(surface_sag(first, first.semi_aperture, 0.0)))
        o = pupil - d * (back / d[:, 2:3])
        opl = o @ d[0]
    else:
        s = torch.tensor(source.object_point(), dtype=DTYPE)
        if s[2] >= 0:
            raise ConfigurationError("finite source must lie in front of the first vertex")
        d = pupil - s
        d = d / torch.linalg.norm(d, dim=1, keepdim=True)
        o = s.expand(count, 3).clone()
        opl = torch.zeros(count, dtype=DTYPE)
    return RayBundle(
        o=o,
        d=d,
        opl=opl,
        amp=torch.ones(count, dtype=DTYPE),
        wavelength=float(source.wavelength),
        reason=torch.zeros(count, dtype=torch.int8),
    )


def intersect(bundle: RayBundle, surface: SurfaceSpec, z0=0.0, n=1.0) -> RayBundle:
    """Move rays onto ``surface`` (vertex at ``z0``) and add ``n`` times the path.

    The root is found by Newton iteration from the vertex tangent plane with
    autograd disabled; one extra differentiable Newton step then attaches the
    dependence on ray and surface parameters.
    """
    o, d = bundle.o, bundle.d
    live = bundle.valid
    if (d[live, 2] <= 0).any():
        raise SimulationError("intersect expects forward-propagating rays (d_z > 0)")
    dz = torch.where(live, d[:, 2], torch.ones_like(d[:, 2]))
    flat = not surface.curvature and not any(surface.asphere)
    with torch.no_grad():
        t = (z0 - o[:, 2]) / dz
        if not flat:
            converged = torch.zeros_like(live)
            for _ in range(NEWTON_MAXITER):
                p = o + d * t[:, None]
                f = z0 + surface_sag(surface, p[:, 0], p[:, 1]) - p[:, 2]
                converged = f.abs() <= 0.01 * NEWTON_TOL
                if bool((converged | ~live).all()):
                    break
                gx, gy = sag_gradient(surface, p[:, 0], p[:, 1])
                df = gx * d[:, 0] + gy * d[:, 1] - d[:, 2]
                df = torch.where(df.abs() < 1e-12, torch.full_like(df, -1.0), df)
                t = t - torch.clamp(f / df, -10.0, 10.0)
    t = t.detach()
    if not flat:
        # Differentiable polish step; t itself is already converged.
        p = o + d * t[:, None]
        f = z0 + surface_sag(surface, p[:, 0], p[:, 1]) - p[:, 2]
        gx, gy = sag_gradient(surface, p[:, 0].detach(), p[:, 1].detach())
        df = gx * d[:, 0].detach() + gy * d[:, 1].detach() - d[:, 2].detach()
        t = t - f / torch.where(df.abs() < 1e-12, torch.full_like(df, -1.0), df)
    else:
        t = (z0 - o[:, 2]) / dz
    t = torch.where(live, t, torch.zeros_like(t))
    p = o + d * t[:, None]
    out = replace(bundle, o=p, opl=bundle.opl + n * t)
    if flat:
        residual = torch.zeros_like(t)
    else:
        residual = (z0 + surface_sag(surface, p[:, 0], p[:, 1]) - p[:, 2]).detach()
    r2 = (p[:, 0] ** 2 + p[:, 1] ** 2).detach()
    radicand_bad = 1.0 - (1.0 + surface.conic) * surface.curvature**2 * r2 < 0
    out = out.kill(~in_aperture(surface, p[:, 0].detach(), p[:, 1].detach()) | radicand_bad, Invalid.APERTURE)
    out = out.kill((residual.abs() > NEWTON_TOL) | (t.detach() < -1e-9) | ~torch.isfinite(t.detach()), Invalid.DIVERGENCE)
    return out


def refract(bundle: RayBundle, surface: SurfaceSpec, n1: float, n2: float) -> RayBundle:
    """Vector Snell refraction at the surface point each ray sits on.

    The tangential component of n·d is preserved; total internal reflection
    marks the ray invalid.
    """
    normal = surface_normal(surface, bundle.o[:, 0], bundle.o[:, 1])
    return refract_with_normal(bundle, normal, n1, n2)


def refract_with_normal(bundle: RayBundle, normal, n1, n2) -> RayBundle:
    d = bundle.d
    cosi = (d * normal).sum(-1, keepdim=True)
    normal = torch.where(cosi < 0, -normal, normal)
    cosi = cosi.abs()
    mu = n1 / n2
    sin2t = mu * mu * (1.0 - cosi * cosi)
    tir = (sin2t > 1.0).squeeze(-1)
    cost = torch.sqrt(torch.clamp(1.0 - sin2t, min=0.0))
    new_d = mu * d + (cost - mu * cosi) * normal
    new_d = new_d / torch.linalg.norm(new_d, dim=-1, keepdim=True)
    new_d = torch.where(tir[:, None], d, new_d)
    return replace(bundle, d=new_d).kill(tir, Invalid.TIR)


def ideal_bend(bundle: RayBundle, surface: SurfaceSpec, z0=0.0) -> RayBundle:
    """Aberration-free thin lens at a plane.

    Each ray is sent to the focal-plane point of its direction,
    P = c + f (dx/dz, dy/dz, 1), and its OPL is adjusted so that every ray of a
    collimated bundle reaches P with the same path as the ray through the
    lens center (Fermat). Exact for collimated input.
    """
    f = surface.focal_length
    o, d = bundle.o, bundle.d
    c = torch.tensor([0.0, 0.0, z0], dtype=DTYPE)
    p = c + f * torch.stack([d[:, 0] / d[:, 2], d[:, 1] / d[:, 2], torch.ones_like(d[:, 2])], dim=-1)
    to_p = p - o
    dist = torch.linalg.norm(to_p, dim=-1)
    new_d = to_p / dist[:, None] * math.copysign(1.0, f)
    ref = torch.linalg.norm(p - c, dim=-1)
    delta = math.copysign(1.0, f) * (ref - dist) - ((o - c) * d).sum(-1)
    return replace(bundle, d=new_d, opl=bundle.opl + delta)


def trace_surfaces(bundle, lens: LensSystem, start=0, stop=None, wavelength=None, doe_deflect=None):
    """Trace through ``lens.surfaces[start:stop]`` (intersect + refract each).

    ``doe_deflect`` is an optional callable applied at the DOE plane (used by
    the grating-equation baseline). Raises SimulationError naming the surface
    where the last live ray died.
    """
    wl = bundle.wavelength if wavelength is None else wavelength
    stop = len(lens.surfaces) if stop is None else stop
    zs = lens.z_positions
    for i in range(start, stop):
        s = lens.surfaces[i]
        n1 = refractive_index(lens.medium_before(i), wl)
        bundle = intersect(bundle, s, zs[i], n1)
        if s.kind == "refractive":
            bundle = refract(bundle, s, n1, refractive_index(s.material, wl))
        elif s.kind == "ideal-lens":
            bundle = ideal_bend(bundle, s, zs[i])
        elif s.kind == "doe-plane" and doe_deflect is not None:
            bundle = doe_deflect(bundle)
        if not bool(bundle.valid.any()):
            raise SimulationError(f"all rays lost at surface {i} ({s.kind})")
    return bundle


def trace_to_doe(source: SourceSpec, lens: LensSystem, seed=0, sampling="jitter") -> RayBundle:
    """Bundle arriving at the DOE plane, before any DOE modulation."""
    bundle = sample_source(source, lens, seed=seed, sampling=sampling)
    bundle = trace_surfaces(bundle, lens, 0, lens.doe_index + 1)
    frac = float(bundle.valid.double().mean())
    if frac < 0.5:
        warnings.warn(
            f"only {frac:.0%} of rays reach the DOE plane for field {source.field}",
            stacklevel=2,
        )
    return bundle


def propagate_rays_to_plane(bundle: RayBundle, z, n=1.0) -> RayBundle:
    """Free-space transfer to the plane z (tensor or float); no aperture."""
    live = bundle.valid
    dz = torch.where(live, bundle.d[:, 2], torch.ones_like(bundle.d[:, 2]))
    t = (z - bundle.o[:, 2]) / dz
    t = torch.where(live, t, torch.zeros_like(t))
    return replace(bundle, o=bundle.o + bundle.d * t[:, None], opl=bundle.opl + n * t)


def chief_ray(source: SourceSpec, lens: LensSystem, iters=20) -> RayBundle:
    """Single ray from the source through the stop center.

    The launch point on the z = 0 plane is aimed with a secant update so the
    ray crosses the stop at its center even when the stop is buried.
    """
    one = replace(source, spp=4)
    zs = lens.z_positions
    k = lens.stop_index
    target = torch.zeros(2, dtype=DTYPE)
    aim = torch.zeros(2, dtype=DTYPE)

    def launch(xy):
        b = sample_source(one, lens, sampling="grid")
        b = b.select(slice(0, 1))
        pupil = torch.cat([xy, torch.zeros(1, dtype=DTYPE)])
        if source.is_infinite:
            d = b.d[0]
            back = 1.0 + abs(float(surface_sag(lens.surfaces[0], lens.surfaces[0].semi_aperture, 0.0)))
            o = pupil - d * (back / d[2])
            return replace(b, o=o[None], opl=(o @ d)[None])
        s = torch.tensor(one.object_point(), dtype=DTYPE)
        d = (pupil - s) / torch.linalg.norm(pupil - s)
        return replace(b, o=s[None].clone(), d=d[None], opl=torch.zeros(1, dtype=DTYPE))

    def at_stop(xy):
        b = launch(xy)
        if k > 0:
            b = trace_surfaces(b, lens, 0, k)
        b = intersect(b, lens.surfaces[k], zs[k], refractive_index(lens.medium_before(k), one.wavelength))
        return b.o[0, :2]

    if k > 0:
        eps = 1e-4
        for _ in range(iters):
            with torch.no_grad():
                r = at_stop(aim) - target
                if float(r.abs().max()) < 1e-12:
                    break
                jx = (at_stop(aim + torch.tensor([eps, 0.0], dtype=DTYPE)) - target - r) / eps
                jy = (at_stop(aim + torch.tensor([0.0, eps], dtype=DTYPE)) - target - r) / eps
                jac = torch.stack([jx, jy], dim=1)
                aim = aim - torch.linalg.solve(jac, r)
    b = launch(aim)
    b = replace(b, reason=torch.zeros(1, dtype=torch.int8))
    return b


def dump_rays_csv(path, snapshots):
    """Write ``[(surface_index, bundle), ...]`` as CSV rows for debugging."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["surface", "x", "y", "z", "dx", "dy", "dz", "opl", "valid"])
        for idx, b in snapshots:
            o = b.o.detach().numpy()
            d = b.d.detach().numpy()
            opl = b.opl.detach().numpy()
            valid = b.valid.numpy()
            for k in range(len(opl)):
                w.writerow([idx, *o[k], *d[k], opl[k], int(valid[k])])

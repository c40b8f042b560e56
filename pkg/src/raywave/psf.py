"""Point spread functions from the ray-wave chain.

For each point source: trace to the DOE plane, splat the rays into a complex
field, apply the DOE, propagate to the sensor with the angular spectrum
method, square, box-sum onto sensor pixels and crop a window around the
chief ray.

Each field is simulated on a window of the DOE plane centered on the chief
ray, and propagated into an output window centered on the chief ray's
sensor landing, so off-axis PSFs cost the same as on-axis ones.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import io
from .doe import DoeProfile, modulate
from .errors import ConfigurationError, RayWaveError, SimulationError
from .geometry import DTYPE, LensSystem, SensorSpec
from .grating import doe_deflector
from .tracing import SourceSpec, chief_ray, propagate_rays_to_plane, trace_surfaces, trace_to_doe
from .wavefield import ALIAS_TOLERANCE, PAD_FACTOR, FieldGrid, propagate, splat_field

DEFAULT_WINDOW = 64  # sensor pixels

# Three wavelengths per color channel (µm).
CHANNEL_CENTERS = {"R": 0.62, "G": 0.55, "B": 0.46}
CHANNEL_OFFSETS = (-0.02, 0.0, 0.02)


def rgb_wavelengths():
    return [round(c + o, 6) for c in CHANNEL_CENTERS.values() for o in CHANNEL_OFFSETS]


def fov_grid(half_diagonal_deg, n=3):
    """Row-major (n, n) field grid whose corners sit at ``half_diagonal_deg``.

    Tile (i, j) of an image gets the field whose image lands there: the
    sensor image is inverted, so row 0 (top, smallest sensor y) maps to the
    largest positive field y, and column 0 to the largest positive field x.
    """
    a = half_diagonal_deg / math.sqrt(2.0)
    t = np.linspace(a, -a, n) if n > 1 else np.zeros(1)
    return [(float(x), float(y)) for y in t for x in t], (n, n)


@dataclass(frozen=True)
class GridConfig:
    """Sampling of one PSF simulation.

    field_pitch: complex-field sample pitch on the DOE plane, µm.
    field_window: field samples per side of the DOE-plane window.
    pad: zero-padding factor for the angular spectrum step.
    psf_window: cropped patch size in sensor pixels.
    reference_wavelength: chief ray (µm) that centers the crop for every
        wavelength of a field, so lateral color stays in the patches.
        None centers each wavelength on its own chief ray.
    """

    field_pitch: float = 2.0
    field_window: int = 512
    pad: int = PAD_FACTOR
    psf_window: int = DEFAULT_WINDOW
    sampling: str = "jitter"
    alias_tolerance: float = ALIAS_TOLERANCE
    normalize_splat: bool = True
    reference_wavelength: float | None = 0.55

    def __post_init__(self):
        if self.field_window % 2 or self.field_window <= 0:
            raise ConfigurationError("field_window must be a positive even number")
        if self.psf_window <= 0:
            raise ConfigurationError("psf_window must be positive")

    def to_dict(self):
        return {
            "field_pitch_um": self.field_pitch,
            "field_window": self.field_window,
            "pad": self.pad,
            "psf_window": self.psf_window,
            "sampling": self.sampling,
            "alias_tolerance": self.alias_tolerance,
            "normalize_splat": self.normalize_splat,
            "reference_wavelength_um": self.reference_wavelength,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            field_pitch=d.get("field_pitch_um", 2.0),
            field_window=d.get("field_window", 512),
            pad=d.get("pad", PAD_FACTOR),
            psf_window=d.get("psf_window", DEFAULT_WINDOW),
            sampling=d.get("sampling", "jitter"),
            alias_tolerance=d.get("alias_tolerance", ALIAS_TOLERANCE),
            normalize_splat=d.get("normalize_splat", True),
            reference_wavelength=d.get("reference_wavelength_um", 0.55),
        )


@dataclass
class PsfResult:
    patch: torch.Tensor  # (w, w), unit sum
    center: tuple  # fractional sensor (row, col) of the chief ray
    spill: float  # energy fraction outside the patch
    sensor: torch.Tensor | None = None  # resampled output window, before normalization
    origin: tuple = (0, 0)  # sensor (row, col) of sensor[0, 0]
    field: object = None  # ComplexField at the sensor plane


# ---------------------------------------------------------------------------
# Sensor geometry
# ---------------------------------------------------------------------------


def _nm(v_mm):
    return int(round(v_mm * 1e6))


def integer_ratio(field_pitch, sensor_pitch):
    m = sensor_pitch / field_pitch
    mi = int(round(m))
    if mi < 1 or abs(m - mi) > 1e-9:
        raise ConfigurationError(
            f"sensor pitch {sensor_pitch} µm is not an integer multiple of the field pitch {field_pitch} µm"
        )
    return mi


def sensor_resample(intensity, field_pitch, sensor_pitch):
    """Box-sum ``intensity`` (field pitch) onto sensor pixels.

    Each sensor pixel receives the sum of the m×m samples in its footprint,
    m = sensor_pitch / field_pitch, so total energy is preserved.
    """
    m = integer_ratio(field_pitch, sensor_pitch)
    if m == 1:
        return intensity
    h, w = intensity.shape[-2:]
    if h % m or w % m:
        raise ConfigurationError(f"intensity grid {h}x{w} is not divisible by the pitch ratio {m}")
    return intensity.reshape(*intensity.shape[:-2], h // m, m, w // m, m).sum(dim=(-3, -1))


def sensor_coordinates(sensor: SensorSpec, x, y):
    """Fractional (row, col) of the point (x, y) mm; pixel centers are integers.

    The sensor is centered on the optical axis and row index grows with +y.
    """
    h, w = sensor.resolution
    s = sensor.pixel_pitch * 1e-3
    return ((y + h * s / 2) / s - 0.5, (x + w * s / 2) / s - 0.5)


def sensor_position(sensor: SensorSpec, row, col):
    h, w = sensor.resolution
    s = sensor.pixel_pitch * 1e-3
    return ((col + 0.5) * s - w * s / 2, (row + 0.5) * s - h * s / 2)


def crop_valid(image, origin, center, window, warn_outside=True):
    """Cut a ``window``-pixel patch around ``center`` from a sensor-pixel image.

    ``image[0, 0]`` is sensor pixel ``origin``; ``center`` is the fractional
    sensor (row, col) to center on. Pixel ``round(center)`` lands at patch
    index ``window // 2``. Returns (patch, spill) where spill is the fraction
    of ``image`` energy left outside the patch.
    """
    r0 = math.floor(center[0] + 0.5) - window // 2 - origin[0]
    c0 = math.floor(center[1] + 0.5) - window // 2 - origin[1]
    h, w = image.shape
    patch = image.new_zeros((window, window))
    rs, re = max(r0, 0), min(r0 + window, h)
    cs, ce = max(c0, 0), min(c0 + window, w)
    if rs < re and cs < ce:
        patch[rs - r0 : re - r0, cs - c0 : ce - c0] = image[rs:re, cs:ce]
    elif warn_outside:
        warnings.warn("PSF window lies entirely outside the simulated region", stacklevel=2)
    total = float(image.detach().sum())
    spill = 1.0 - float(patch.detach().sum()) / total if total > 0 else 0.0
    return patch, max(spill, 0.0)


def energy_centroid(image, origin=(0, 0)):
    img = image.detach()
    h, w = img.shape
    tot = float(img.sum())
    if tot <= 0:
        raise SimulationError("PSF has zero energy")
    rows = torch.arange(h, dtype=img.dtype)
    cols = torch.arange(w, dtype=img.dtype)
    r = float((img.sum(1) * rows).sum()) / tot + origin[0]
    c = float((img.sum(0) * cols).sum()) / tot + origin[1]
    return (r, c)


# ---------------------------------------------------------------------------
# Window placement
# ---------------------------------------------------------------------------


def _snap(value_mm, step_nm):
    return round(_nm(value_mm) / step_nm) * step_nm * 1e-6


def trace_chief(lens: LensSystem, doe: DoeProfile | None, source: SourceSpec):
    """Chief ray at the DOE plane and at the sensor, or None if lost.

    Returns ((x, y) at the DOE, (x, y) on the sensor, (dx, dy) direction
    cosines arriving at the DOE). Continuous DOEs deflect the chief ray by
    their local grating; pixel maps are ignored here.
    """
    try:
        b = chief_ray(source, lens)
        b = trace_surfaces(b, lens, 0, lens.doe_index + 1)
    except RayWaveError:
        return None
    if not bool(b.valid.all()):
        return None
    at_doe = tuple(float(v) for v in b.o[0, :2].detach())
    direction = tuple(float(v) for v in b.d[0, :2].detach())
    if doe is not None and doe.kind != "pixel":
        b = doe_deflector(doe)(b)
    b = propagate_rays_to_plane(b, lens.doe_z + float(lens.sensor_distance))
    if not bool(b.valid.all()):
        return None
    return at_doe, tuple(float(v) for v in b.o[0, :2].detach()), direction


def _ray_centroids(bundle, lens, doe):
    live = bundle.valid
    at_doe = tuple(float(v) for v in bundle.o[live, :2].detach().mean(0))
    b = bundle
    if doe is not None and doe.kind != "pixel":
        b = doe_deflector(doe)(b)
    b = propagate_rays_to_plane(b, lens.doe_z + float(lens.sensor_distance))
    live = b.valid
    return at_doe, tuple(float(v) for v in b.o[live, :2].detach().mean(0))


def doe_window(doe: DoeProfile, lens: LensSystem, grid: GridConfig, near, carrier=(0.0, 0.0)):
    """Field grid on the DOE plane centered as close to ``near`` as alignment allows.

    The window edges fall on DOE pixel boundaries and the window is kept
    inside the DOE. Its width must also be a whole number of sensor pixels so
    the propagated window resamples cleanly.
    """
    p = grid.field_pitch
    f_nm = _nm(doe.feature_size * 1e-3)
    s_nm = _nm(lens.sensor.pixel_pitch * 1e-3)
    step = f_nm
    n = grid.field_window
    half_nm = n * _nm(p * 1e-3) // 2
    if half_nm % f_nm or (2 * half_nm) % s_nm:
        raise ConfigurationError(
            f"field window {n} x {p} µm must span an even number of DOE cells "
            f"({doe.feature_size} µm) and a whole number of sensor pixels"
        )
    for c_doe, size in zip(doe.center, (doe.size[1], doe.size[0])):
        if (_nm(c_doe - size / 2)) % f_nm:
            raise ConfigurationError("DOE edges must lie on multiples of the feature size")
    center = []
    for c_near, c_doe, size in zip(near, doe.center, (doe.size[1], doe.size[0])):
        lo = c_doe - size / 2 + half_nm * 1e-6
        hi = c_doe + size / 2 - half_nm * 1e-6
        if lo > hi + 1e-12:
            raise ConfigurationError(
                f"field window {2 * half_nm / 1e6:g} mm is wider than the DOE ({size} mm)"
            )
        c = _snap(min(max(c_near, lo), hi), step)
        if c < lo - 1e-12:
            c += step * 1e-6
        if c > hi + 1e-12:
            c -= step * 1e-6
        center.append(c)
    return FieldGrid((n, n), p, tuple(center), z=lens.doe_z, carrier=carrier)


# ---------------------------------------------------------------------------
# PSF
# ---------------------------------------------------------------------------


def place_source(lens: LensSystem, doe: DoeProfile, source: SourceSpec, grid: GridConfig, bundle=None):
    """DOE-plane field grid and sensor landing point for one source.

    The field window follows the source's own chief ray and factors out
    its tilt as the grid carrier; the landing point (the crop center) is the
    chief ray at ``grid.reference_wavelength``.
    Returns (field_grid, landing_xy, chief_ok).
    """
    carrier = (0.0, 0.0)
    chief = trace_chief(lens, doe, source)
    if chief is None:
        warnings.warn(
            f"chief ray lost for field {source.field}; centering on the energy centroid",
            stacklevel=3,
        )
        if bundle is None:
            bundle = trace_to_doe(source, lens, sampling=grid.sampling)
        at_doe, landing = _ray_centroids(bundle, lens, doe)
    else:
        at_doe, landing, direction = chief
        lam_mm = source.wavelength * 1e-3
        carrier = (direction[0] / lam_mm, direction[1] / lam_mm)
        ref = grid.reference_wavelength
        if ref is not None and ref != source.wavelength:
            ref_chief = trace_chief(lens, doe, replace(source, wavelength=ref))
            if ref_chief is not None:
                landing = ref_chief[1]
    return doe_window(doe, lens, grid, at_doe, carrier), landing, chief is not None


def field_to_psf(
    u, lens: LensSystem, grid: GridConfig, landing, chief_ok=True, distance=None, keep_field=False, splatted=False
):
    """Propagate a DOE-plane field to the sensor and cut the PSF patch.

    ``splatted`` marks fields built from rays, whose Monte Carlo noise floor
    is excluded from the sampling check.
    """
    gap = lens.sensor_distance if distance is None else distance
    s_mm = lens.sensor.pixel_pitch * 1e-3
    row, col = sensor_coordinates(lens.sensor, *landing)
    # Output window centered on the sensor pixel corner nearest to the landing.
    out_c = sensor_position(lens.sensor, math.floor(row + 0.5) - 0.5, math.floor(col + 0.5) - 0.5)
    shift = (out_c[0] - u.grid.center[0], out_c[1] - u.grid.center[1])
    out = propagate(
        u, gap, pad=grid.pad, crop=False, shift=shift, tolerance=grid.alias_tolerance, noise_floor=splatted
    )
    img = sensor_resample(out.intensity(), grid.field_pitch, lens.sensor.pixel_pitch)
    ox = out.grid.center[0] - out.grid.extent[1] / 2
    oy = out.grid.center[1] - out.grid.extent[0] / 2
    r0, c0 = sensor_coordinates(lens.sensor, ox + s_mm / 2, oy + s_mm / 2)
    origin = (int(round(r0)), int(round(c0)))
    center = (row, col) if chief_ok else energy_centroid(img, origin)
    patch, spill = crop_valid(img, origin, center, grid.psf_window)
    total = patch.sum()
    if float(total.detach()) <= 0:
        raise SimulationError("PSF window received no energy")
    return PsfResult(
        patch=patch / total,
        center=center,
        spill=spill,
        sensor=img,
        origin=origin,
        field=out if keep_field else None,
    )


def flat_doe(lens: LensSystem, grid: GridConfig = GridConfig()) -> DoeProfile:
    """A zero-phase DOE spanning the DOE plane, with cells at the field pitch."""
    semi = lens.surfaces[lens.doe_index].semi_aperture
    return DoeProfile(kind="even", coeffs=(0.0,), size=(2 * semi, 2 * semi), feature_size=grid.field_pitch)


def compute_psf(
    lens: LensSystem,
    doe: DoeProfile | None,
    source: SourceSpec,
    grid: GridConfig = GridConfig(),
    seed=0,
    keep_field=False,
    distance=None,
) -> PsfResult:
    """Ray-wave PSF of one point source.

    ``distance`` optionally overrides the DOE-to-sensor gap (a tensor here
    makes the PSF differentiable with respect to it). The returned patch is
    non-negative with unit sum; ``center`` is the fractional sensor
    coordinate of the chief ray. ``doe=None`` means no DOE.
    """
    doe = flat_doe(lens, grid) if doe is None else doe
    placed = lens if distance is None else lens.with_sensor_distance(float(torch.as_tensor(distance).detach()))
    bundle = trace_to_doe(source, lens, seed=seed, sampling=grid.sampling)
    fgrid, landing, chief_ok = place_source(placed, doe, source, grid, bundle)
    u = splat_field(bundle, fgrid, normalize=grid.normalize_splat)
    u = modulate(u, doe)
    return field_to_psf(u, placed, grid, landing, chief_ok, distance, keep_field, splatted=True)


# ---------------------------------------------------------------------------
# Stacks
# ---------------------------------------------------------------------------


@dataclass
class PsfStack:
    """PSFs on a (field, wavelength, depth) grid.

    ``fovs`` is a row-major list of field angles (deg) forming a
    ``fov_shape`` = (rows, cols) grid; ``patches`` has shape
    (F, L, D, w, w) and ``centers`` (F, L, D, 2) in sensor (row, col).
    """

    fovs: list
    wavelengths: list
    depths: list
    patches: np.ndarray
    centers: np.ndarray
    spill: np.ndarray
    fov_shape: tuple = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fov_shape is None:
            self.fov_shape = (1, len(self.fovs))
        self.fov_shape = tuple(int(v) for v in self.fov_shape)
        if self.fov_shape[0] * self.fov_shape[1] != len(self.fovs):
            raise ConfigurationError(f"fov_shape {self.fov_shape} does not match {len(self.fovs)} fields")

    @property
    def window(self):
        return self.patches.shape[-1]

    def entries(self):
        for fi in range(len(self.fovs)):
            for li in range(len(self.wavelengths)):
                for di in range(len(self.depths)):
                    yield fi, li, di

    def entry_name(self, fi, li, di):
        return f"psf_f{fi:03d}_l{li:02d}_d{di:02d}.pfm"

    def save(self, directory):
        d = io.ensure_dir(directory)
        files = []
        for fi, li, di in self.entries():
            name = self.entry_name(fi, li, di)
            io.write_pfm(d / name, self.patches[fi, li, di])
            files.append(
                {
                    "file": name,
                    "fov_deg": list(self.fovs[fi]),
                    "wavelength_um": self.wavelengths[li],
                    "depth_mm": _json_depth(self.depths[di]),
                    "index": [fi, li, di],
                    "center": [float(v) for v in self.centers[fi, li, di]],
                    "spill": float(self.spill[fi, li, di]),
                    "sha256": hashlib.sha256((d / name).read_bytes()).hexdigest(),
                }
            )
        manifest = {
            "fov_shape": list(self.fov_shape),
            "fovs_deg": [list(f) for f in self.fovs],
            "wavelengths_um": list(self.wavelengths),
            "depths_mm": [_json_depth(v) for v in self.depths],
            "window": self.window,
            "entries": files,
            "meta": self.meta,
        }
        io.write_json(d / "manifest.json", manifest)
        return d / "manifest.json"

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        if not (d / "manifest.json").is_file():
            raise ConfigurationError(f"no PSF stack manifest in {d}")
        m = io.read_json(d / "manifest.json")
        fovs = [tuple(f) for f in m["fovs_deg"]]
        lams = list(m["wavelengths_um"])
        depths = [math.inf if v is None else v for v in m["depths_mm"]]
        w = m["window"]
        patches = np.zeros((len(fovs), len(lams), len(depths), w, w))
        centers = np.zeros((len(fovs), len(lams), len(depths), 2))
        spill = np.zeros((len(fovs), len(lams), len(depths)))
        for e in m["entries"]:
            fi, li, di = e["index"]
            patches[fi, li, di] = io.read_pfm(d / e["file"])
            centers[fi, li, di] = e["center"]
            spill[fi, li, di] = e["spill"]
        return cls(fovs, lams, depths, patches, centers, spill, tuple(m["fov_shape"]), m.get("meta", {}))

    def channel_kernels(self, depth_index=0):
        """Per-field RGB kernels, shape (F, 3, w, w), each unit sum.

        Wavelengths are assigned to the nearest channel center and averaged.
        A single-wavelength stack is used for all three channels.
        """
        p = self.patches[:, :, depth_index]
        if len(self.wavelengths) == 1:
            k = np.repeat(p, 3, axis=1)
            return k / k.sum(axis=(-2, -1), keepdims=True)
        centers = list(CHANNEL_CENTERS.values())
        groups = [[] for _ in centers]
        for li, lam in enumerate(self.wavelengths):
            groups[int(np.argmin([abs(lam - c) for c in centers]))].append(li)
        if any(not g for g in groups):
            raise ConfigurationError(
                f"wavelengths {self.wavelengths} do not cover all three color channels"
            )
        k = np.stack([p[:, g].mean(axis=1) for g in groups], axis=1)
        return k / k.sum(axis=(-2, -1), keepdims=True)


def _json_depth(v):
    return None if math.isinf(v) else float(v)


@contextmanager
def single_threaded_torch():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def build_stack(
    lens: LensSystem,
    doe: DoeProfile | None,
    fovs,
    wavelengths,
    depths=(math.inf,),
    grid: GridConfig = GridConfig(),
    spp=100_000,
    seed=0,
    threads=1,
    fov_shape=None,
) -> PsfStack:
    """PSFs for every (field, wavelength, depth) combination.

    Entries are independent: each gets its own ray seed derived from
    ``seed`` and its source, and runs single-threaded, so the result does
    not depend on ``threads``.
    """
    doe = flat_doe(lens, grid) if doe is None else doe
    fovs = [tuple(float(v) for v in f) for f in fovs]
    wavelengths = [float(v) for v in wavelengths]
    depths = [float(v) for v in depths]
    w = grid.psf_window
    nf, nl, nd = len(fovs), len(wavelengths), len(depths)
    patches = np.zeros((nf, nl, nd, w, w))
    centers = np.zeros((nf, nl, nd, 2))
    spill = np.zeros((nf, nl, nd))

    def run(idx):
        fi, li, di = idx
        src = SourceSpec(field=fovs[fi], depth=depths[di], wavelength=wavelengths[li], spp=spp)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", UserWarning)
                res = compute_psf(lens, doe, src, grid, seed=seed)
        except RayWaveError as exc:
            raise type(exc)(
                f"PSF failed at fov={fovs[fi]}, wavelength={wavelengths[li]}, depth={depths[di]}: {exc}"
            ) from exc
        return idx, res

    order = [(fi, li, di) for fi in range(nf) for li in range(nl) for di in range(nd)]
    with single_threaded_torch(), torch.no_grad():
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(run, order))
        else:
            results = [run(i) for i in order]
    for (fi, li, di), res in results:
        patches[fi, li, di] = res.patch.numpy()
        centers[fi, li, di] = res.center
        spill[fi, li, di] = res.spill
    meta = {
        "lens": lens.name,
        "doe_hash": doe.digest(),
        "spp": spp,
        "seed": seed,
        "grid": grid.to_dict(),
        "sensor_pitch_um": lens.sensor.pixel_pitch,
    }
    return PsfStack(fovs, wavelengths, depths, patches, centers, spill, fov_shape, meta)

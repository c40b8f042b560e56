"""Objectives and the optimization loop.

Gradients come from reverse-mode autodiff (torch) through the whole chain:
trace, splat, modulate, propagate, PSF. The optics run in float64; an
explicit precision boundary hands the PSF to the imaging side in float32.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .doe import DoeProfile
from .errors import ConfigurationError, OptimizationError, SimulationError
from .geometry import DTYPE, LensSystem
from .psf import CHANNEL_CENTERS, GridConfig, compute_psf
from .reference import trace_to_sensor
from .tracing import SourceSpec

WORKING_DTYPE = torch.float32


# ---------------------------------------------------------------------------
# Precision boundary
# ---------------------------------------------------------------------------


class _ToWorking(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, dtype):
        ctx.src = x.dtype
        return x.to(dtype)

    @staticmethod
    def backward(ctx, g):
        return g.to(ctx.src), None


def to_working_precision(x, dtype=WORKING_DTYPE):
    """Hand an optics-side float64 tensor to the imaging side.

    Values are rounded once to ``dtype``; gradients flow back in the
    source precision.
    """
    return _ToWorking.apply(x, dtype)


# ---------------------------------------------------------------------------
# Parameters and configuration
# ---------------------------------------------------------------------------


@dataclass
class ParamVector:
    """Named, ordered parameters with per-entry scales.

    The optimizer works on ``values / scales`` so that coefficients of very
    different magnitude move at comparable rates.
    """

    names: list
    values: torch.Tensor
    scales: torch.Tensor = None

    def __post_init__(self):
        self.names = list(self.names)
        self.values = torch.as_tensor(self.values, dtype=DTYPE).detach().clone()
        if self.scales is None:
            self.scales = torch.ones_like(self.values)
        self.scales = torch.as_tensor(self.scales, dtype=DTYPE).detach().clone()
        if len(self.names) != self.values.numel() or self.values.shape != self.scales.shape:
            raise ConfigurationError("ParamVector names, values and scales must align")
        if not bool(torch.isfinite(self.values).all()):
            raise ConfigurationError("ParamVector values must be finite")

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name):
        return self.values[self.names.index(name)]

    def replace_values(self, values):
        return ParamVector(self.names, values, self.scales)

    def digest(self):
        return hashlib.sha256(self.values.numpy().tobytes()).hexdigest()[:16]

    def to_dict(self):
        return {
            "names": self.names,
            "values": [float(v) for v in self.values],
            "scales": [float(v) for v in self.scales],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["names"], d["values"], d.get("scales"))


@dataclass(frozen=True)
class OptConfig:
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 100
    seed: int = 0
    wavelength_mode: str = "all"  # "all" or "random" (one per channel triplet)
    alpha: float = 0.1  # gradient-domain L1 weight

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError("step size must be > 0")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.wavelength_mode not in ("all", "random"):
            raise ConfigurationError(f"unknown wavelength_mode {self.wavelength_mode!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def doe_params(
    doe: DoeProfile,
    lens: LensSystem | None = None,
    optimize_distance=False,
    distance_scale=1.0,
    phase_scale=None,
    rho_edge=1.0,
):
    """ParamVector for a polynomial DOE, optionally with the DOE-to-sensor gap.

    By default each coefficient is scaled by max(|value|, 1). With
    ``phase_scale`` (rad) a coefficient is instead scaled so that a unit step
    changes the phase at ``rho_edge`` (normalized radius of the beam edge) by
    ``phase_scale``; every term then moves the wavefront comparably.
    """
    if doe.kind == "pixel":
        raise OptimizationError(
            "pixel-wise or quantized DOEs are not differentiable; optimize the continuous "
            "polynomial profile and quantize afterwards"
        )
    if doe.levels is not None:
        raise OptimizationError("quantized DOE: optimize the continuous profile and quantize afterwards")
    c = doe.coefficient_tensor().detach()
    first = 1 if doe.kind == "even" else 2
    prefix = "alpha" if doe.kind == "even" else "beta"
    names = [f"{prefix}_{i}" for i in range(first, first + len(c))]
    if phase_scale is None:
        scales = [max(abs(float(v)), 1.0) for v in c]
    else:
        powers = [2 * i if doe.kind == "even" else i for i in range(first, first + len(c))]
        scales = [phase_scale / rho_edge**k for k in powers]
    values = list(c)
    if optimize_distance:
        if lens is None:
            raise ConfigurationError("optimizing the sensor distance needs the lens")
        names.append("sensor_distance")
        values.append(float(lens.sensor_distance))
        scales.append(distance_scale)
    return ParamVector(names, torch.tensor([float(v) for v in values], dtype=DTYPE), scales)


def split_params(values, doe: DoeProfile, names):
    """(doe with tensor coefficients, distance tensor or None) from a value vector."""
    has_d = names and names[-1] == "sensor_distance"
    k = len(names) - (1 if has_d else 0)
    return replace(doe, coeffs=values[:k]), (values[k] if has_d else None)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _finite_diffs(x):
    # x: (..., H, W) or (H, W, C) handled by caller
    return x[..., :, 1:] - x[..., :, :-1], x[..., 1:, :] - x[..., :-1, :]


def _chw(x):
    x = x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x), dtype=DTYPE)
    return x.permute(2, 0, 1) if x.dim() == 3 else x[None]


def gradient_l1(a, b):
    """Mean absolute difference of horizontal plus vertical forward differences."""
    a, b = _chw(a), _chw(b)
    ax, ay = _finite_diffs(a)
    bx, by = _finite_diffs(b)
    return (ax - bx).abs().mean() + (ay - by).abs().mean()


def loss_total(pred, ref, alpha=0.1):
    """MSE plus ``alpha`` times the gradient-domain L1 term."""
    p = pred if torch.is_tensor(pred) else torch.as_tensor(np.asarray(pred), dtype=DTYPE)
    r = ref if torch.is_tensor(ref) else torch.as_tensor(np.asarray(ref), dtype=p.dtype)
    r = r.to(p.dtype)
    if p.shape != r.shape:
        raise ConfigurationError(f"shape mismatch: {tuple(p.shape)} vs {tuple(r.shape)}")
    return ((p - r) ** 2).mean() + alpha * gradient_l1(p, r)


def psf_compactness(patch):
    """Intensity-weighted second moment about the centroid, in pixels²."""
    h, w = patch.shape[-2:]
    tot = patch.sum()
    yy = torch.arange(h, dtype=patch.dtype)[:, None]
    xx = torch.arange(w, dtype=patch.dtype)[None, :]
    cy = (patch * yy).sum() / tot
    cx = (patch * xx).sum() / tot
    return (patch * ((yy - cy) ** 2 + (xx - cx) ** 2)).sum() / tot


def rms_radius(points):
    """RMS distance of (N, 2) points from their centroid."""
    if points.shape[0] < 10:
        raise SimulationError(f"only {points.shape[0]} valid rays; RMS spot size needs at least 10")
    c = points.mean(0)
    return torch.sqrt(((points - c) ** 2).sum(-1).mean())


def rms_spot_size(lens: LensSystem, doe: DoeProfile | None, fovs, wavelengths, spp=2_500, seed=0, distance=None, depth=math.inf):
    """Polychromatic geometric RMS spot radius (µm) per field, and their mean.

    Hits of all wavelengths are pooled about their common centroid, so
    lateral color counts toward the spot. Continuous DOEs act as local
    gratings; a pixel-wise DOE is left out with a warning.
    """
    if doe is not None and doe.kind == "pixel":
        warnings.warn("pixel-wise DOE omitted from the ray-traced spot size", stacklevel=2)
        doe = None
    per_fov = []
    for f in fovs:
        hits = []
        for lam in wavelengths:
            src = SourceSpec(field=f, wavelength=lam, spp=spp, depth=depth)
            b = trace_to_sensor(lens, doe, src, seed=seed, sampling="grid", distance=distance)
            hits.append(b.o[b.valid, :2])
        per_fov.append(rms_radius(torch.cat(hits)) * 1e3)
    per_fov = torch.stack(per_fov)
    return per_fov, per_fov.mean()


# ---------------------------------------------------------------------------
# Gradient and optimizer
# ---------------------------------------------------------------------------


def gradient(params: ParamVector, objective, **kw):
    """(loss, ∂loss/∂values) for ``objective(values, **kw)``."""
    v = params.values.clone().requires_grad_(True)
    loss = objective(v, **kw)
    (g,) = torch.autograd.grad(loss, v, allow_unused=True)
    if g is None:
        g = torch.zeros_like(v)
    return loss.detach(), g


def finite_difference(params: ParamVector, objective, rel_step=1e-4, **kw):
    """Central differences with step ``rel_step`` × max(|value|, scale)."""
    out = torch.zeros_like(params.values)
    with torch.no_grad():
        for i in range(len(params)):
            h = rel_step * max(abs(float(params.values[i])), float(params.scales[i]))
            vp = params.values.clone()
            vm = params.values.clone()
            vp[i] += h
            vm[i] -= h
            out[i] = (objective(vp, **kw) - objective(vm, **kw)) / (2 * h)
    return out


def sample_wavelengths(wavelengths, mode, rng):
    """All wavelengths, or one drawn uniformly from each channel's group."""
    if mode == "all":
        return list(wavelengths)
    centers = list(CHANNEL_CENTERS.values())
    groups = {}
    for lam in wavelengths:
        groups.setdefault(int(np.argmin([abs(lam - c) for c in centers])), []).append(lam)
    return [g[int(rng.integers(len(g)))] for _, g in sorted(groups.items())]


@dataclass
class OptResult:
    params: ParamVector
    trajectory: list
    optimizer_state: dict = field(default_factory=dict)

    def trajectory_csv(self):
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "wavelengths", "loss", "grad_norm", "params_hash"])
        for r in self.trajectory:
            w.writerow([r["iteration"], r["wavelengths"], repr(r["loss"]), repr(r["grad_norm"]), r["params_hash"]])
        return buf.getvalue()

    def trajectory_hash(self):
        return hashlib.sha256(self.trajectory_csv().encode()).hexdigest()

    def write_trajectory(self, path):
        with open(path, "w") as f:
            f.write(self.trajectory_csv())


def optimize(params: ParamVector, objective, config: OptConfig, wavelengths=(0.55,), resume=None, dump_path=None):
    """Adam on the scaled parameters.

    ``objective(values, wavelengths=[...])`` returns a scalar tensor. One row
    is logged per evaluated iterate, so ``iterations = 0`` gives a single row
    and unchanged parameters. A non-finite loss or gradient aborts with the
    iteration state attached to the exception (and written to ``dump_path``).
    """
    rng = np.random.default_rng(config.seed)
    z = (params.values / params.scales).clone().requires_grad_(True)
    opt = torch.optim.Adam([z], lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)
    start = 0
    if resume is not None:
        z.data = torch.tensor(resume["z"], dtype=DTYPE)
        start = int(resume["iteration"])
        rng = np.random.default_rng(config.seed)
        for _ in range(start):
            sample_wavelengths(wavelengths, config.wavelength_mode, rng)
        if resume.get("adam"):
            st = resume["adam"]
            opt.state[z] = {
                "step": torch.tensor(float(st["step"])),
                "exp_avg": torch.tensor(st["exp_avg"], dtype=DTYPE),
                "exp_avg_sq": torch.tensor(st["exp_avg_sq"], dtype=DTYPE),
            }
    traj = []
    for it in range(start, config.iterations + 1):
        lams = sample_wavelengths(wavelengths, config.wavelength_mode, rng)
        opt.zero_grad()
        values = z * params.scales
        loss = objective(values, wavelengths=lams)
        if not bool(torch.isfinite(loss)):
            _abort(it, params, z, loss, lams, dump_path)
        loss.backward()
        g = z.grad.detach() / params.scales  # gradient w.r.t. the unscaled values
        if not bool(torch.isfinite(g).all()):
            _abort(it, params, z, loss, lams, dump_path)
        traj.append(
            {
                "iteration": it,
                "wavelengths": ";".join(f"{l:g}" for l in lams),
                "loss": float(loss.detach()),
                "grad_norm": float(torch.linalg.norm(g)),
                "params_hash": params.replace_values(values.detach()).digest(),
            }
        )
        if it < config.iterations:
            opt.step()
    final = params.replace_values((z * params.scales).detach())
    st = opt.state.get(z, {})
    adam = (
        {
            "step": float(st["step"]),
            "exp_avg": st["exp_avg"].tolist(),
            "exp_avg_sq": st["exp_avg_sq"].tolist(),
        }
        if st
        else {}
    )
    return OptResult(final, traj, {"z": z.detach().tolist(), "iteration": config.iterations, "adam": adam})


def _abort(it, params, z, loss, lams, dump_path):
    state = {
        "iteration": it,
        "names": params.names,
        "values": (z * params.scales).detach().tolist(),
        "loss": float(loss.detach()),
        "wavelengths": lams,
    }
    if dump_path is not None:
        with open(dump_path, "w") as f:
            json.dump(state, f, indent=2)
    raise OptimizationError(f"non-finite loss or gradient at iteration {it}", state=state)


def save_checkpoint(path, result: OptResult, config: OptConfig, extra=None):
    data = {
        "params": result.params.to_dict(),
        "config": config.to_dict(),
        "seed": config.seed,
        "optimizer": result.optimizer_state,
        "extra": extra or {},
    }
    with open(path, "w") as f:
        json.dump(data, f, indent=2)


def load_checkpoint(path):
    with open(path) as f:
        d = json.load(f)
    return ParamVector.from_dict(d["params"]), OptConfig.from_dict(d["config"]), d


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def spot_objective(lens: LensSystem, doe: DoeProfile, names, fovs, spp=2_500, seed=0, depth=math.inf):
    """Mean RMS spot radius (µm) over fields and the sampled wavelengths."""

    def objective(values, wavelengths=(0.55,)):
        d, dist = split_params(values, doe, names)
        return rms_spot_size(lens, d, fovs, wavelengths, spp=spp, seed=seed, distance=dist, depth=depth)[1]

    return objective


def compactness_objective(lens: LensSystem, doe: DoeProfile, names, fovs, grid: GridConfig, spp=10_000, seed=0, depths=(math.inf,)):
    """Mean PSF second moment over fields, wavelengths and depths."""

    def objective(values, wavelengths=(0.55,)):
        d, dist = split_params(values, doe, names)
        terms = []
        for f in fovs:
            for lam in wavelengths:
                for z in depths:
                    src = SourceSpec(field=f, wavelength=lam, spp=spp, depth=z)
                    res = compute_psf(lens, d, src, grid, seed=seed, distance=dist)
                    terms.append(psf_compactness(res.patch))
        return torch.stack(terms).mean()

    return objective


def wiener_objective(
    lens: LensSystem,
    doe: DoeProfile,
    names,
    image,
    grid: GridConfig,
    depths=(math.inf,),
    fovs=((0.0, 0.0),),
    spp=10_000,
    seed=0,
    noise_sigma=0.01,
    snr=100.0,
    alpha=0.0,
    working_dtype=WORKING_DTYPE,
    loss="wiener",
    depth_reduce="mean",
    moment_balance=0.0,
):
    """Post-Wiener (or raw-capture) image loss over fields and depths.

    For each (field, depth) one PSF per wavelength is used over the whole
    image; wavelengths are averaged into a single grayscale kernel, or
    grouped into RGB channels when the image has three channels. ``image``
    may also be a list of images, one per entry of ``fovs``.

    Per-depth losses are averaged over fields, then combined across depths
    by ``depth_reduce``: "mean", or "max" to optimize the worst depth. A
    positive ``moment_balance`` adds that weight times log(max/min) of the
    per-depth PSF second moments, which favors depth-invariant PSFs.
    """
    from .imaging import simulate_capture, wiener_reconstruct

    def as_t(x):
        return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x), dtype=DTYPE)

    imgs = [as_t(x) for x in image] if isinstance(image, (list, tuple)) else [as_t(image)] * len(fovs)
    if len(imgs) != len(fovs):
        raise ConfigurationError(f"{len(imgs)} images for {len(fovs)} fields")
    if depth_reduce not in ("mean", "max"):
        raise ConfigurationError(f"unknown depth_reduce {depth_reduce!r}")
    fovs = [tuple(float(v) for v in f) for f in fovs]

    def objective(values, wavelengths=(0.55,)):
        d, dist = split_params(values, doe, names)
        cache = {}

        def kernel(f, z, color):
            key = (f, z, color)
            if key not in cache:
                patches = []
                for lam in wavelengths:
                    src = SourceSpec(field=f, wavelength=lam, spp=spp, depth=z)
                    patches.append(compute_psf(lens, d, src, grid, seed=seed, distance=dist).patch)
                cache[key] = _channel_stack(patches, wavelengths, color)
            return cache[key]

        per_depth = []
        for k, z in enumerate(depths):
            terms = []
            for fi, (f, img) in enumerate(zip(fovs, imgs)):
                kern = to_working_precision(kernel(f, z, img.dim() == 3), working_dtype)
                target = img.to(working_dtype)
                noise_seed = seed + k + len(depths) * fi
                raw = simulate_capture(target, kern, noise_sigma=noise_sigma, seed=noise_seed, clip=False)
                out = raw if loss == "raw" else wiener_reconstruct(raw, kern, snr=snr)
                terms.append(loss_total(out, target, alpha).to(DTYPE))
            per_depth.append(torch.stack(terms).mean())
        per_depth = torch.stack(per_depth)
        total = per_depth.max() if depth_reduce == "max" else per_depth.mean()
        if moment_balance > 0 and len(depths) > 1:
            m = []
            for z in depths:
                ks = [kernel(f, z, img.dim() == 3) for f, img in zip(fovs, imgs)]
                m.append(torch.stack([psf_compactness(k.mean(dim=(0, 1))) for k in ks]).mean())
            m = torch.stack(m)
            total = total + moment_balance * (torch.log(m.max()) - torch.log(m.min()))
        return total

    return objective


def _channel_stack(patches, wavelengths, color):
    if not color:
        k = torch.stack(patches).mean(0)
        return (k / k.sum())[None, None]
    centers = list(CHANNEL_CENTERS.values())
    groups = [[] for _ in centers]
    for p, lam in zip(patches, wavelengths):
        groups[int(np.argmin([abs(lam - c) for c in centers]))].append(p)
    chans = []
    for g in groups:
        if not g:
            g = patches
        k = torch.stack(g).mean(0)
        chans.append(k / k.sum())
    return torch.stack(chans)[None]

"""Command-line entry point: ``raywave {psf,validate,optimize,render}``.

Every command reads one JSON run config (``--config``), writes its outputs
and a ``manifest.json`` into the output directory, and exits with 0 on
success, 2 on a configuration error and 3 on a simulation error. A manifest
can be passed back as ``--config`` to re-run the same command.

Config keys (all optional except where a command needs them)::

    lens      bundled name (singlet, doublet, asphere) or path to a prescription
    doe       null, a DOE file path, or an inline DOE dict
    scene     {fovs | fov_grid: {half_diagonal_deg, n}, wavelengths, depths, spp}
    grid      GridConfig fields (field_pitch_um, field_window, psf_window, ...)
    seed, out, threads
    validate  {wavelength, spp}
    optimize  {recipe | objective, iterations, lr, ...}
    render    {image, psf: "delta" | "stack", stack, snr, noise_sigma}

Relative paths are resolved against the config file's directory. The
environment variables RAYWAVE_OUT and RAYWAVE_THREADS override ``out`` and
``threads``; command-line flags override both.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, io
from .doe import DoeProfile, load_doe, save_doe
from .errors import ConfigurationError, RayWaveError
from .geometry import LensSystem, fixture_lens, load_lens

log = logging.getLogger("raywave")

COMMANDS = ("psf", "validate", "optimize", "render")
MONTAGE_FLOOR = 1e-6  # fraction of each patch's peak
ENV_OUT = "RAYWAVE_OUT"
ENV_THREADS = "RAYWAVE_THREADS"

EXIT_OK, EXIT_CONFIG, EXIT_SIM = 0, 2, 3


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """A resolved run config: absolute paths, overrides applied."""

    data: dict
    base: Path
    out: Path
    seed: int = 0
    threads: int = 1
    extra: dict = field(default_factory=dict)

    def section(self, name):
        s = self.data.get(name) or {}
        if not isinstance(s, dict):
            raise ConfigurationError(f"config section {name!r} must be an object")
        return s

    def path(self, value):
        p = Path(value)
        return p if p.is_absolute() else (self.base / p)

    def canonical(self):
        """Everything that determines the outputs (not ``out`` or ``threads``)."""
        d = {k: v for k, v in self.data.items() if k not in ("out", "threads")}
        d["seed"] = self.seed
        return d

    def digest(self):
        text = json.dumps(self.canonical(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()


def _read_config(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise ConfigurationError(f"{p}: top level must be an object")
    return d, p.parent.resolve()


def load_config(args, command):
    d, base = _read_config(args.config) if args.config else ({}, Path.cwd())
    if "command" in d and "config" in d:
        # A manifest from an earlier run: its config holds absolute paths.
        if d["command"] != command:
            raise ConfigurationError(f"manifest is from {d['command']!r}, not {command!r}")
        d = d["config"]
    d = copy.deepcopy(d)
    cfg = RunConfig(d, base, Path("."))
    # Resolve file references up front so the manifest is self-contained.
    if isinstance(d.get("lens"), str) and d["lens"].endswith(".json"):
        d["lens"] = str(cfg.path(d["lens"]).resolve())
    if isinstance(d.get("doe"), str):
        d["doe"] = str(cfg.path(d["doe"]).resolve())
    for sec, key in (("render", "image"), ("render", "stack")):
        s = d.get(sec)
        if isinstance(s, dict) and isinstance(s.get(key), str) and not s[key].startswith("skimage:"):
            s[key] = str(cfg.path(s[key]).resolve())
    if args.spp is not None:
        d.setdefault("scene", {})["spp"] = args.spp
    seed = args.seed if args.seed is not None else d.get("seed", 0)
    out = args.out or os.environ.get(ENV_OUT) or d.get("out") or f"raywave-{command}"
    threads = args.threads or os.environ.get(ENV_THREADS) or d.get("threads", 1)
    try:
        seed, threads = int(seed), int(threads)
    except (TypeError, ValueError):
        raise ConfigurationError("seed and threads must be integers") from None
    if threads < 1:
        raise ConfigurationError("threads must be >= 1")
    d["seed"] = seed
    cfg.seed, cfg.threads = seed, threads
    cfg.out = Path(out) if Path(out).is_absolute() else Path.cwd() / out
    return cfg


def build_lens(cfg: RunConfig) -> LensSystem:
    ref = cfg.data.get("lens")
    if ref is None:
        raise ConfigurationError("config has no 'lens'")
    if ref.endswith(".json"):
        if not Path(ref).is_file():
            raise ConfigurationError(f"lens file not found: {ref}")
        return load_lens(ref)
    return fixture_lens(ref)


def build_doe(cfg: RunConfig, lens: LensSystem) -> DoeProfile:
    ref = cfg.data.get("doe")
    if ref is None:
        from .psf import flat_doe

        return flat_doe(lens, build_grid(cfg))
    if isinstance(ref, dict):
        return DoeProfile.from_dict(ref)
    return load_doe(ref)


def build_grid(cfg: RunConfig):
    from .psf import GridConfig

    return GridConfig.from_dict(cfg.section("grid"))


def build_scene(cfg: RunConfig):
    """(fovs, fov_shape, wavelengths, depths, spp) from the ``scene`` section."""
    from .psf import fov_grid

    s = cfg.section("scene")
    if "fov_grid" in s:
        g = s["fov_grid"]
        fovs, shape = fov_grid(float(g["half_diagonal_deg"]), int(g.get("n", 3)))
    else:
        fovs = [tuple(float(v) for v in f) for f in s.get("fovs", [[0.0, 0.0]])]
        shape = tuple(s.get("fov_shape", (1, len(fovs))))
    lams = [float(v) for v in s.get("wavelengths", [0.55])]
    depths = [math.inf if v is None else float(v) for v in s.get("depths", [None])]
    spp = int(s.get("spp", 100_000))
    if not fovs or not lams or not depths:
        raise ConfigurationError("scene needs at least one field, wavelength and depth")
    return fovs, shape, lams, depths, spp


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------


def log_tile(patch, floor=MONTAGE_FLOOR):
    """Map a PSF patch to [0, 1] on a log scale from ``floor``·peak to peak."""
    p = np.asarray(patch, dtype=np.float64)
    peak = p.max()
    if peak <= 0:
        return np.zeros_like(p)
    x = np.log10(np.maximum(p / peak, floor))
    return 1.0 - x / math.log10(floor)


def montage(rows, gap=2):
    """Grid of equally sized tiles (None leaves a blank) separated by ``gap`` pixels."""
    h = max(t.shape[0] for r in rows for t in r if t is not None)
    w = max(t.shape[1] for r in rows for t in r if t is not None)
    n_c = max(len(r) for r in rows)
    out = np.full((len(rows) * (h + gap) - gap, n_c * (w + gap) - gap), 0.25)
    for i, r in enumerate(rows):
        for j, t in enumerate(r):
            if t is not None:
                out[i * (h + gap) : i * (h + gap) + h, j * (w + gap) : j * (w + gap) + w] = t
    return out


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(cfg: RunConfig, command, outputs, extra=None):
    files = sorted(str(Path(p).relative_to(cfg.out)) for p in outputs)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "config_hash": cfg.digest(),
        "config": cfg.canonical(),
        "outputs": {f: _sha(cfg.out / f) for f in files},
    }
    manifest.update(extra or {})
    io.write_json(cfg.out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_psf(cfg: RunConfig):
    from .psf import build_stack

    lens = build_lens(cfg)
    doe = build_doe(cfg, lens)
    grid = build_grid(cfg)
    fovs, shape, lams, depths, spp = build_scene(cfg)
    log.info("psf: %d fields x %d wavelengths x %d depths, spp=%d", len(fovs), len(lams), len(depths), spp)
    stack = build_stack(lens, doe, fovs, lams, depths, grid, spp=spp, seed=cfg.seed, threads=cfg.threads, fov_shape=shape)
    d = io.ensure_dir(cfg.out)
    stack_manifest = stack.save(d / "psf")
    rows = [[log_tile(stack.patches[fi, li, di]) for li in range(len(lams)) for di in range(len(depths))] for fi in range(len(fovs))]
    io.write_png(d / "montage.png", montage(rows), encode_srgb=False)
    outputs = [stack_manifest, d / "montage.png"] + [d / "psf" / stack.entry_name(*e) for e in stack.entries()]
    entries = [
        {"fov_deg": list(fovs[fi]), "wavelength_um": lams[li], "depth_mm": None if math.isinf(depths[di]) else depths[di],
         "file": f"psf/{stack.entry_name(fi, li, di)}"}
        for fi, li, di in stack.entries()
    ]
    write_manifest(cfg, "psf", outputs, {"entries": entries, "max_spill": float(stack.spill.max())})
    return stack


def cmd_validate(cfg: RunConfig):
    from .reference import compare_fixture, thinlens_fixtures, write_compare_csv

    s = cfg.section("validate")
    lam = float(s.get("wavelength", 0.55))
    spp = int(cfg.section("scene").get("spp", s.get("spp", 100_000)))
    d = io.ensure_dir(cfg.out)
    rows, tiles = [], []
    for fx in thinlens_fixtures():
        log.info("validate: %s", fx.name)
        row, patches = compare_fixture(fx, lam, spp=spp, seed=cfg.seed)
        rows.append(row)
        tiles.append([log_tile(patches[k]) if patches[k] is not None else None for k in ("oracle", "raywave", "grating")])
        for k, p in patches.items():
            if p is not None:
                io.write_pfm(d / f"{fx.name}_{k}.pfm", p)
    write_compare_csv(d / "validate.csv", rows)
    io.write_png(d / "montage.png", montage(tiles), encode_srgb=False)
    outputs = [p for p in d.iterdir() if p.suffix in (".pfm", ".csv", ".png")]
    write_manifest(cfg, "validate", outputs, {"rows": rows})
    return rows


def _images(spec, size=64, gray=True):
    from .recipes import sample_image

    out = []
    for ref in spec:
        if ref.startswith("skimage:"):
            out.append(sample_image(ref.split(":", 1)[1], size, gray=gray))
        else:
            im = io.read_png(ref)
            out.append(im.mean(axis=-1) if gray else im)
    return out


def _generic_optimize(cfg: RunConfig, s):
    from .optim import (
        OptConfig,
        compactness_objective,
        doe_params,
        optimize,
        spot_objective,
        split_params,
        wiener_objective,
    )

    lens = build_lens(cfg)
    doe = build_doe(cfg, lens)
    grid = build_grid(cfg)
    fovs, _, lams, depths, spp = build_scene(cfg)
    p = doe_params(
        doe,
        lens,
        optimize_distance=bool(s.get("optimize_distance", False)),
        distance_scale=float(s.get("distance_scale", 1.0)),
        phase_scale=s.get("phase_scale"),
        rho_edge=float(s.get("rho_edge", 1.0)),
    )
    kind = s.get("objective", "spot")
    if kind == "spot":
        obj = spot_objective(lens, doe, p.names, fovs, spp=spp, seed=cfg.seed, depth=depths[0])
    elif kind == "compactness":
        obj = compactness_objective(lens, doe, p.names, fovs, grid, spp=spp, seed=cfg.seed, depths=depths)
    elif kind == "wiener":
        imgs = _images(s.get("images", ["skimage:camera"]), int(s.get("image_size", 64)))
        obj = wiener_objective(
            lens, doe, p.names, imgs, grid, depths=depths, fovs=[fovs[0]] * len(imgs), spp=spp, seed=cfg.seed,
            alpha=float(s.get("alpha", 0.1)), depth_reduce=s.get("depth_reduce", "mean"),
            moment_balance=float(s.get("moment_balance", 0.0)),
        )
    else:
        raise ConfigurationError(f"unknown objective {kind!r}")
    conf = OptConfig(
        lr=float(s.get("lr", 0.05)),
        iterations=int(s.get("iterations", 100)),
        seed=cfg.seed,
        wavelength_mode=s.get("wavelength_mode", "all"),
    )
    res = optimize(p, obj, conf, wavelengths=lams)
    d, dist = split_params(res.params.values, doe, p.names)
    d = d.with_coeffs(tuple(float(v) for v in d.coeffs))
    new_lens = lens.with_sensor_distance(float(dist)) if dist is not None else lens
    return conf, res, doe, d, lens, new_lens


def _recipe_optimize(cfg: RunConfig, s):
    from . import recipes
    from .optim import OptConfig

    name = s["recipe"]
    it = s.get("iterations")
    if name == "achromat":
        kw = {"iterations": int(it if it is not None else 200), "lr": float(s.get("lr", 0.05))}
        base, _ = recipes.achromat_baseline()
        design = recipes.achromat_optimize(seed=cfg.seed, **kw)
    elif name == "edof":
        kw = {"iterations": int(it if it is not None else 60), "lr": float(s.get("lr", 0.03))}
        sc = recipes.edof_scenario()
        base = recipes.Design("none", sc.lens, sc.doe.with_coeffs(recipes.EDOF_START))
        design = recipes.edof_optimize(seed=cfg.seed, **kw)
    else:
        raise ConfigurationError(f"unknown recipe {name!r} (achromat, edof)")
    conf = OptConfig(lr=kw["lr"], iterations=kw["iterations"], seed=cfg.seed)
    return conf, design.result, base.doe, design.doe, base.lens, design.lens


def cmd_optimize(cfg: RunConfig):
    from .optim import rms_spot_size, save_checkpoint

    s = cfg.section("optimize")
    if s.get("recipe"):
        conf, res, doe0, doe1, lens0, lens1 = _recipe_optimize(cfg, s)
    else:
        conf, res, doe0, doe1, lens0, lens1 = _generic_optimize(cfg, s)
    d = io.ensure_dir(cfg.out)
    save_checkpoint(d / "checkpoint.json", res, conf, {"recipe": s.get("recipe")})
    res.write_trajectory(d / "trajectory.csv")
    save_doe(doe1, d / "doe.json")
    report = {
        "loss_before": res.trajectory[0]["loss"],
        "loss_after": res.trajectory[-1]["loss"],
        "iterations": conf.iterations,
        "params_before": [float(v) for v in doe0.coefficient_tensor()],
        "params_after": res.params.to_dict(),
        "sensor_distance_before": lens0.sensor_distance,
        "sensor_distance_after": lens1.sensor_distance,
    }
    if s.get("report_spot", True) and doe1.kind != "pixel":
        fovs, _, lams, depths, _ = build_scene(cfg) if cfg.data.get("scene") else ([(0.0, 0.0)], None, [0.55], [math.inf], 0)
        with torch.no_grad():
            report["rms_spot_before_um"] = float(rms_spot_size(lens0, doe0, fovs, lams, depth=depths[0])[1])
            report["rms_spot_after_um"] = float(rms_spot_size(lens1, doe1, fovs, lams, depth=depths[0])[1])
    io.write_json(d / "report.json", report)
    outputs = [d / "checkpoint.json", d / "trajectory.csv", d / "doe.json", d / "report.json"]
    write_manifest(cfg, "optimize", outputs, {"trajectory_hash": res.trajectory_hash()})
    return report


def cmd_render(cfg: RunConfig, image=None):
    from .imaging import psnr, simulate_capture, ssim, wiener_reconstruct, write_metrics_csv
    from .psf import PsfStack

    s = cfg.section("render")
    ref = image or s.get("image")
    if ref is None:
        raise ConfigurationError("render needs an image (--image or render.image)")
    if not ref.startswith("skimage:") and not Path(ref).is_file():
        raise ConfigurationError(f"image not found: {ref}")
    img = _images([ref], int(s.get("image_size", 256)), gray=False)[0]
    mode = s.get("psf", "scene")
    lens = None
    if mode == "delta":
        kernel = torch.zeros(1, 3, 1, 1, dtype=torch.float64)
        kernel[..., 0, 0] = 1.0
        kernels, shape = kernel, (1, 1)
    elif mode == "stack":
        stack = PsfStack.load(cfg.path(s["stack"]))
        kernels, shape = stack, None
    else:
        stack = cmd_psf_stack(cfg)
        lens = stack.meta.get("lens")
        kernels, shape = stack, None
    sigma = float(s.get("noise_sigma", 0.0 if mode == "delta" else 0.01))
    snr = float(s.get("snr", 100.0))
    raw = simulate_capture(img, kernels, noise_sigma=sigma, seed=cfg.seed, grid_shape=shape)
    rec = wiener_reconstruct(raw, kernels, snr=snr, grid_shape=shape).clamp(0, 1)
    d = io.ensure_dir(cfg.out)
    io.write_png(d / "raw.png", raw.numpy())
    io.write_png(d / "reconstructed.png", rec.numpy())
    rows = [
        {"name": "raw", "psnr": psnr(raw, img), "ssim": ssim(raw, img)},
        {"name": "reconstructed", "psnr": psnr(rec, img), "ssim": ssim(rec, img)},
    ]
    write_metrics_csv(d / "metrics.csv", rows)
    write_manifest(cfg, "render", [d / "raw.png", d / "reconstructed.png", d / "metrics.csv"], {"lens": lens})
    return rows


def cmd_psf_stack(cfg: RunConfig):
    from .psf import build_stack

    lens = build_lens(cfg)
    doe = build_doe(cfg, lens)
    fovs, shape, lams, depths, spp = build_scene(cfg)
    return build_stack(lens, doe, fovs, lams, depths[:1], build_grid(cfg), spp=spp, seed=cfg.seed, threads=cfg.threads, fov_shape=shape)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="raywave", description="Hybrid ray-wave lens and DOE simulation.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "psf": "simulate a PSF stack and write PFM files plus a log-scale montage",
        "validate": "compare ray-wave and grating-ray PSFs against the scalar oracle",
        "optimize": "optimize DOE coefficients (and optionally the sensor gap)",
        "render": "simulate a capture and its Wiener reconstruction",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=str, help="run config (JSON) or an earlier manifest")
        p.add_argument("--out", type=str, help="output directory")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--threads", type=int, help="worker threads")
        p.add_argument("--spp", type=int, help="rays per point source")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "render":
            p.add_argument("--image", type=str, help="input PNG, or skimage:<name>")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args, args.command)
        torch.set_num_threads(cfg.threads)
        if args.command == "psf":
            cmd_psf(cfg)
        elif args.command == "validate":
            cmd_validate(cfg)
        elif args.command == "optimize":
            cmd_optimize(cfg)
        else:
            cmd_render(cfg, getattr(args, "image", None))
    except (ConfigurationError, KeyError) as exc:
        print(f"raywave {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RayWaveError as exc:
        print(f"raywave {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SIM
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

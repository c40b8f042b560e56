"""DOE phase profiles: polynomial phase, wavelength remapping, wrapping and quantization.

Builds an even-radial Fresnel lens, shows how its phase scales with
wavelength through the substrate dispersion, and quantizes it to 16
levels. The phase maps and height profile are written as PNG/PFM to
demos/out/doe.
"""

import math
from pathlib import Path

import numpy as np
import torch

from raywave import io
from raywave.doe import FUSED_SILICA, DoeProfile, doe_phase, height_map, native_phase, quantize, save_doe, wrap_phase
from raywave.geometry import refractive_index
from raywave.wavefield import FieldGrid

torch.set_default_dtype(torch.float64)
out = io.ensure_dir(Path(__file__).parent / "out" / "doe")

# A 200 mm diffractive lens on a 2 mm plate: α1 = -π R² / (λ0 f).
size = 2.048
half_diag = 0.5 * math.hypot(size, size)
alpha1 = -math.pi * half_diag**2 / (0.55e-3 * 200.0)
doe = DoeProfile(kind="even", coeffs=(alpha1,), size=(size, size), feature_size=8.0, substrate=FUSED_SILICA)
print(f"alpha_1 = {alpha1:.1f} rad, {abs(alpha1) / (2 * math.pi):.1f} zones at the corner")

grid = FieldGrid((256, 256), 8.0)
for lam in (0.46, 0.55, 0.62):
    phi = doe_phase(doe, grid, lam)
    print(f"lambda={lam}: wrapped phase range {float(phi.min()):.1f} .. {float(phi.max()):.1f} rad")

phi0 = native_phase(doe)
wrapped = wrap_phase(phi0)
q = quantize(doe, 16)
err = torch.remainder(q.phase - phi0 + math.pi, 2 * math.pi) - math.pi
print(f"16-level quantization: max phase error {float(err.abs().max()) / math.pi:.4f} pi")

h = height_map(doe)
zone = 0.55 / (refractive_index(FUSED_SILICA, 0.55) - 1)
print(f"unwrapped relief {float(h.max() - h.min()):.2f} µm, one 2pi zone {zone:.3f} µm deep")

io.write_png(out / "wrapped.png", (wrapped / (2 * math.pi)).numpy(), encode_srgb=False)
io.write_png(out / "quantized16.png", (q.phase / (2 * math.pi)).numpy(), encode_srgb=False)
io.write_pfm(out / "height_um.pfm", h.numpy().astype(np.float32))
save_doe(doe, out / "fresnel.json")
print("wrote", sorted(p.name for p in out.iterdir()))

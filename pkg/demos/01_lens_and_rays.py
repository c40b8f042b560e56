"""Lens prescriptions, surface sag and coherent ray tracing.

Loads the bundled singlet, traces a fan of rays from an off-axis point at
infinity to the DOE plane, and prints how the optical path length spreads
across the pupil. Run: ``python demos/01_lens_and_rays.py``.
"""


import torch

from raywave.geometry import fixture_lens, refractive_index, surface_sag
from raywave.tracing import SourceSpec, chief_ray, trace_to_doe

torch.set_default_dtype(torch.float64)

lens = fixture_lens("singlet")
for s in lens.surfaces:
    print(f"{s.kind:10s} semi={s.semi_aperture:6.3f} mm  thickness={s.thickness:7.3f} mm  c={s.curvature:+.4f}")
print("sensor distance behind the DOE plane:", lens.sensor_distance, "mm")

# Sag of the front surface at a few radii.
front = lens.surfaces[1]
for r in (0.0, 1.0, 2.0):
    print(f"sag at r={r} mm: {float(surface_sag(front, torch.tensor(r), torch.tensor(0.0))):.6f} mm")

# Dispersion of the glass at the three channel wavelengths.
glass = front.material
if glass is not None:
    print("n(0.46, 0.55, 0.62) =", [round(refractive_index(glass, l), 6) for l in (0.46, 0.55, 0.62)])

# A 2.8 degree field point; the chief ray is aimed through the stop center.
src = SourceSpec(field=(0.0, 2.8), wavelength=0.55, spp=10_000)
c = chief_ray(src, lens)
print("chief ray launch point (mm):", c.o[0].tolist())

# Trace the whole pupil and look at the optical path across it.
b = trace_to_doe(src, lens, seed=0)
opl = b.opl[b.valid]
print(f"{int(b.valid.sum())} of {b.o.shape[0]} rays reach the DOE plane")
print(f"OPL spread: {float(opl.max() - opl.min()) * 1e3:.3f} µm = {float(opl.max() - opl.min()) / 0.55e-3:.1f} waves")
print("unit directions:", bool(torch.allclose(torch.linalg.norm(b.d[b.valid], dim=1), torch.ones(1))))

"""Co-designing a DOE that corrects the chromatic aberration of a singlet.

Three designs on an F/10 singlet with a DOE 20 mm before the sensor:

* no DOE,
* the paraxial achromat, a diffractive lens whose power cancels the
  red-blue focal shift on axis,
* an even-radial DOE and sensor gap optimized end to end for the pooled
  RGB RMS spot at three field angles.

The paraxial design fixes the axis but not the field edge; the optimized
design trades a little on-axis sharpness for a better field average and a
higher post-Wiener PSNR. Takes about two minutes on one core.
"""

from pathlib import Path

from raywave import recipes
from raywave.doe import save_doe
from raywave.reference import focal_distances

out = Path(__file__).parent / "out" / "achromat"
out.mkdir(parents=True, exist_ok=True)

none, paraxial = recipes.achromat_baseline()
f0 = focal_distances(none.lens, (0.46, 0.62))
f1 = focal_distances(paraxial.lens, (0.46, 0.62), paraxial.doe)
print(f"red-blue focal separation: {f0[0.62] - f0[0.46]:.4f} mm without DOE, {f1[0.62] - f1[0.46]:.2e} mm paraxial")

optimized = recipes.achromat_optimize(iterations=200)
traj = optimized.result.trajectory
print(f"optimizer: loss {traj[0]['loss']:.2f} -> {traj[-1]['loss']:.2f} µm over {len(traj) - 1} Adam steps")
optimized.result.write_trajectory(out / "trajectory.csv")
save_doe(optimized.doe, out / "doe.json")

images = [recipes.sample_image(n, 240) for n in recipes.TEST_IMAGES]
print(f"{'design':10s} {'RMS spot per field (µm)':>28s} {'mean':>7s} {'PSNR':>7s}")
for d in (none, paraxial, optimized):
    per, mean = recipes.spot_report(d)
    score, _ = recipes.image_psnr(d, images)
    print(f"{d.name:10s} {'  '.join(f'{v:6.2f}' for v in per):>28s} {mean:7.2f} {score:7.2f}")

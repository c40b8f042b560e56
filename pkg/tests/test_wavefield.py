import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from raywave.doe import DoeProfile, modulate
from raywave.errors import ConfigurationError, NyquistError
from raywave.fixtures import gradient_scenario, singlet_scenario
from raywave.psf import place_source, sensor_resample
from raywave.tracing import RayBundle, SourceSpec, trace_to_doe
from raywave.wavefield import (
    CDTYPE,
    ComplexField,
    FieldGrid,
    alias_free_band,
    check_sampling,
    propagate,
    splat_field,
    transfer_function,
)


def gaussian(grid, w0, tilt=(0.0, 0.0)):
    yy, xx = grid.coords()
    amp = torch.exp(-(xx**2 + yy**2) / w0**2)
    return torch.polar(amp, 2 * math.pi * (tilt[0] * xx + tilt[1] * yy)).to(CDTYPE)


def random_field(n=64, pitch=2.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    data = torch.randn(n, n, generator=g, dtype=torch.float64) + 1j * torch.randn(n, n, generator=g, dtype=torch.float64)
    return ComplexField(data.to(CDTYPE), FieldGrid((n, n), pitch), 0.55)


def test_grid_validation():
    with pytest.raises(ConfigurationError):
        FieldGrid((63, 64), 2.0)
    with pytest.raises(ConfigurationError):
        FieldGrid((64, 64), 0.0)


def test_grid_coordinates_are_cell_centered():
    g = FieldGrid((4, 4), 1000.0, center=(1.0, -2.0))
    yy, xx = g.coords()
    assert xx[0].tolist() == [-0.5, 0.5, 1.5, 2.5]
    assert yy[:, 0].tolist() == [-3.5, -2.5, -1.5, -0.5]


def test_zero_distance_is_identity():
    u = random_field()
    assert torch.equal(propagate(u, 0.0).data, u.data)


@given(st.floats(-50.0, 50.0), st.integers(0, 5))
def test_propagating_band_energy_conserved(z, seed):
    u = random_field(seed=seed)
    out = propagate(u, z, pad=2, crop=False, check=False)
    e0, e1 = float(u.energy()), float(out.energy())
    assert abs(e1 - e0) / e0 <= 1e-10


def test_forward_backward_round_trip():
    u = random_field()
    v = propagate(u, 7.5, pad=1, check=False)
    w = propagate(v, -7.5, pad=1, check=False)
    assert float((w.data - u.data).abs().max()) <= 1e-10


def test_transfer_function_evanescent_zeroed():
    h = transfer_function((64, 64), 0.0001, 0.55e-3, 1.0)
    assert float(h.abs().max()) == 1.0
    assert float(h.abs().min()) == 0.0


def test_carrier_matches_explicit_tilt():
    n, pitch, pad = 256, 2.0, 2
    f0 = 20 / (n * pad * pitch * 1e-3)  # a whole number of padded spectral bins
    g0 = FieldGrid((n, n), pitch)
    g1 = FieldGrid((n, n), pitch, carrier=(f0, 0.0))
    a = ComplexField(gaussian(g0, 0.05, (f0, 0.0)), g0, 0.55)
    b = ComplexField(gaussian(g1, 0.05), g1, 0.55)
    pa = propagate(a, 5.0, pad=pad, crop=False)
    pb = propagate(b, 5.0, pad=pad, crop=False)
    assert float((pa.physical() - pb.physical()).abs().max()) <= 1e-10


def test_gaussian_beam_width():
    lam_mm, w0, z = 0.55e-3, 0.05, 20.0
    g = FieldGrid((512, 512), 2.0)
    u = ComplexField(gaussian(g, w0), g, 0.55)
    out = propagate(u, z, crop=False)
    i = out.intensity()
    yy, xx = out.grid.coords()
    m2 = float((i * xx**2).sum() / i.sum())
    zr = math.pi * w0**2 / lam_mm
    w = w0 * math.sqrt(1 + (z / zr) ** 2)
    # Intensity exp(-2x²/w²) has <x²> = w²/4.
    assert m2 == pytest.approx(w * w / 4, rel=1e-4)


def test_sampling_check_rejects_long_throw():
    g = FieldGrid((64, 64), 4.0)
    u = ComplexField(gaussian(g, 0.002), g, 0.55)
    with pytest.raises(NyquistError) as info:
        propagate(u, 500.0)
    assert info.value.required_pitch_um > 4.0
    rep = check_sampling(u, 0.1)
    assert rep["out_of_band"] <= 1e-2


def test_alias_free_band_shrinks_with_distance():
    assert alias_free_band(1.0, 0.55e-3, 10.0) > alias_free_band(1.0, 0.55e-3, 100.0)


def test_splat_single_ray_bilinear():
    g = FieldGrid((8, 8), 1000.0)
    yy, xx = g.coords()
    o = torch.tensor([[float(xx[0, 3]) + 0.25, float(yy[2, 0]), 0.0]])
    d = torch.tensor([[0.0, 0.0, 1.0]])
    b = RayBundle(o, d, torch.zeros(1), torch.ones(1), 0.55, torch.zeros(1, dtype=torch.int8))
    u = splat_field(b, g, normalize=False)
    a = u.data.abs()
    assert float(a[2, 3]) == pytest.approx(0.75)
    assert float(a[2, 4]) == pytest.approx(0.25)
    assert float(a.sum()) == pytest.approx(1.0)


def test_splat_normalization_off_axis():
    sc = singlet_scenario()
    src = SourceSpec(field=(0.0, 2.8), spp=10_000)
    b = trace_to_doe(src, sc.lens, sampling="grid")
    grid, _, _ = place_source(sc.lens, sc.doe, src, sc.grid, b)
    assert grid.carrier[1] != 0.0
    u = splat_field(b, grid)
    assert float(u.energy()) == pytest.approx(int(b.valid.sum()), rel=1e-12)


def test_carrier_phase_removed_and_restored():
    c = 40.0  # cycles/mm
    g = FieldGrid((8, 8), 1000.0, carrier=(c, 0.0))
    yy, xx = g.coords()
    x0, y0 = float(xx[0, 5]), float(yy[3, 0])
    opl = 12.345678
    o = torch.tensor([[x0, y0, 0.0]])
    d = torch.tensor([[0.0, 0.0, 1.0]])
    b = RayBundle(o, d, torch.tensor([opl]), torch.ones(1), 0.55, torch.zeros(1, dtype=torch.int8))
    u = splat_field(b, g, normalize=False)
    k = 2 * math.pi / 0.55e-3
    env = complex(u.data[3, 5])
    assert cmath_close(env, complex(np.exp(1j * (k * opl - 2 * math.pi * c * x0))))
    assert cmath_close(complex(u.physical()[3, 5]), complex(np.exp(1j * k * opl)))


def cmath_close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def test_chain_energy_conserved():
    sc = gradient_scenario("even")
    src = SourceSpec(spp=sc.spp, depth=sc.depths[0])
    b = trace_to_doe(src, sc.lens, sampling="grid")
    grid, _, _ = place_source(sc.lens, sc.doe, src, sc.grid, b)
    u = modulate(splat_field(b, grid, normalize=False), sc.doe)
    e0 = float(u.energy())
    out = propagate(u, sc.lens.sensor_distance, crop=False)
    img = sensor_resample(out.intensity(), sc.grid.field_pitch, sc.lens.sensor.pixel_pitch)
    assert abs(float(img.sum()) - e0) / e0 <= 1e-8


def test_modulate_is_pure_phase():
    g = FieldGrid((64, 64), 2.0)
    u = random_field(64, 2.0)
    doe = DoeProfile(kind="even", coeffs=(30.0, -5.0), size=(0.128, 0.128), feature_size=2.0)
    v = modulate(u, doe)
    assert torch.allclose(v.data.abs(), u.data.abs(), rtol=0, atol=1e-13)

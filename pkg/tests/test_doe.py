import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given
from hypothesis import strategies as st

from raywave.doe import (
    FUSED_SILICA,
    DoeProfile,
    doe_phase,
    from_height_map,
    height_map,
    level_indices,
    load_doe,
    native_phase,
    phase_at_design,
    polynomial_phase,
    polynomial_phase_gradient,
    quantize,
    remap_phase,
    save_doe,
    wrap_phase,
)
from raywave.errors import ConfigurationError, ModelInapplicableError
from raywave.geometry import refractive_index
from raywave.grating import check_applicable, grating_ray_deflect
from raywave.tracing import RayBundle
from raywave.wavefield import FieldGrid


def small(kind="even", coeffs=(10.0, -3.0), **kw):
    return DoeProfile(kind=kind, coeffs=coeffs, size=(0.256, 0.256), feature_size=4.0, **kw)


def test_remap_identity_is_exact():
    phi = torch.linspace(-50, 50, 101)
    assert remap_phase(phi, 0.55, FUSED_SILICA, 0.55) is phi


def test_remap_closed_form():
    phi = torch.tensor([1.0, 2.0])
    n = refractive_index(FUSED_SILICA, 0.46)
    n0 = refractive_index(FUSED_SILICA, 0.55)
    want = phi * (n - 1) / (n0 - 1) * 0.55 / 0.46
    assert torch.allclose(remap_phase(phi, 0.46, FUSED_SILICA, 0.55), want, rtol=1e-15)


def test_even_polynomial():
    d = small(coeffs=(2.0, 3.0))
    r = d.half_diagonal * 0.5
    phi = polynomial_phase(d, torch.tensor(r), torch.tensor(0.0))
    assert float(phi) == pytest.approx(2.0 * 0.25 + 3.0 * 0.0625, rel=1e-14)


def test_full_polynomial_has_odd_terms():
    d = small("full", coeffs=(1.0, 2.0))
    r = d.half_diagonal * 0.5
    phi = polynomial_phase(d, torch.tensor(0.0), torch.tensor(r))
    assert float(phi) == pytest.approx(1.0 * 0.25 + 2.0 * 0.125, rel=1e-14)


@given(st.floats(-0.1, 0.1), st.floats(-0.1, 0.1))
def test_phase_gradient_matches_autograd(x, y):
    # sqrt(ρ²) has no autograd derivative at the center itself.
    assume(math.hypot(x, y) > 1e-6)
    d = small("full", coeffs=(5.0, -2.0, 7.0, 1.5))
    xt = torch.tensor(x, requires_grad=True)
    yt = torch.tensor(y, requires_grad=True)
    phi = polynomial_phase(d, xt, yt)
    gx, gy = torch.autograd.grad(phi, (xt, yt))
    ax, ay = polynomial_phase_gradient(d, torch.tensor(x), torch.tensor(y))
    assert float(ax) == pytest.approx(float(gx), rel=1e-9, abs=1e-9)
    assert float(ay) == pytest.approx(float(gy), rel=1e-9, abs=1e-9)


def test_wrap_range():
    w = wrap_phase(torch.linspace(-40, 40, 1001))
    assert float(w.min()) >= 0 and float(w.max()) < 2 * math.pi


def test_quantization_error_bound():
    d = small(coeffs=(60.0, -25.0, 9.0))
    q = quantize(d, 16)
    assert q.kind == "pixel" and q.levels == 16
    err = torch.remainder(q.phase - native_phase(d) + math.pi, 2 * math.pi) - math.pi
    assert float(err.abs().max()) <= math.pi / 16 + 1e-12
    assert set(np.unique(level_indices(q))) <= set(range(16))


def test_quantize_needs_two_levels():
    with pytest.raises(ConfigurationError):
        quantize(small(), 1)


def test_height_map_round_trip():
    d = small(coeffs=(12.0, 4.0))
    h = height_map(d)
    p = from_height_map(h, d)
    assert torch.allclose(p.phase, native_phase(d), rtol=1e-13, atol=1e-12)


def test_pixel_upsampling_preserves_steps():
    rng = np.random.default_rng(0)
    ph = rng.uniform(0, 2 * math.pi, (64, 64))
    d = DoeProfile(kind="pixel", phase=ph, size=(0.256, 0.256), feature_size=4.0)
    g = FieldGrid((128, 128), 2.0)
    up = phase_at_design(d, g)
    assert torch.equal(up[::2, ::2], torch.as_tensor(ph))
    assert torch.equal(up[1::2, 1::2], torch.as_tensor(ph))


def test_pixel_shape_checked():
    with pytest.raises(ConfigurationError):
        DoeProfile(kind="pixel", phase=np.zeros((10, 10)), size=(0.256, 0.256), feature_size=4.0)


def test_window_outside_doe_rejected():
    with pytest.raises(ConfigurationError):
        phase_at_design(small(), FieldGrid((256, 256), 2.0))


def test_wrapped_phase_applied():
    d = small(coeffs=(100.0,), wrap=True)
    g = FieldGrid((64, 64), 4.0)
    phi = doe_phase(d, g, 0.55)
    assert float(phi.min()) >= 0 and float(phi.max()) < 2 * math.pi


def test_json_round_trip(tmp_path):
    for d in (small(), small("full", coeffs=(1.0, 2.0, 3.0)), quantize(small(), 8)):
        save_doe(d, tmp_path / "d.json")
        e = load_doe(tmp_path / "d.json")
        assert e.digest() == d.digest()


@given(st.floats(2.0, 200.0), st.sampled_from([0.46, 0.55, 0.62]))
def test_grating_deflection_angle(period_um, lam):
    period = period_um * 1e-3
    grad = (torch.tensor([2 * math.pi / period]), torch.tensor([0.0]))
    b = RayBundle(
        torch.zeros(1, 3), torch.tensor([[0.0, 0.0, 1.0]]), torch.zeros(1), torch.ones(1), lam,
        torch.zeros(1, dtype=torch.int8),
    )
    out = grating_ray_deflect(b, grad)
    want = lam * 1e-3 / period
    if want < 1:
        assert abs(float(out.d[0, 0]) - want) <= 1e-12
        assert abs(float(torch.linalg.norm(out.d[0])) - 1) <= 1e-12


def test_grating_model_inapplicable_on_steps():
    q = quantize(small(coeffs=(200.0,)), 16)
    b = RayBundle(
        torch.tensor([[0.05, 0.05, 0.0], [0.1, 0.0, 0.0]]), torch.tensor([[0.0, 0.0, 1.0]] * 2),
        torch.zeros(2), torch.ones(2), 0.55, torch.zeros(2, dtype=torch.int8),
    )
    with pytest.raises(ModelInapplicableError):
        check_applicable(q, b)
    check_applicable(small(), b)

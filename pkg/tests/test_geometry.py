import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from raywave.errors import ConfigurationError
from raywave.fixtures import BK7, DESIGNS, design_lens
from raywave.geometry import (
    AIR,
    LensSystem,
    Material,
    SensorSpec,
    SurfaceSpec,
    fixture_lens,
    load_lens,
    refractive_index,
    save_lens,
    surface_normal,
    surface_sag,
)

# Schott N-BK7 Sellmeier coefficients (C in µm²).
SCHOTT_BK7 = Material(
    "n-bk7",
    "sellmeier",
    (1.03961212, 0.231792344, 1.01046945, 0.00600069867, 0.0200179144, 103.560653),
)
# Frozen from a 30-digit evaluation of the Sellmeier formula (mpmath).
BK7_AT_550 = 1.51852238762079275875


def test_air_is_identity():
    assert refractive_index(AIR, 0.55) == 1.0


def test_constant_material():
    m = Material("glass", "constant", (1.5,))
    for lam in (0.4, 0.55, 0.7):
        assert refractive_index(m, lam) == 1.5


def test_sellmeier_bk7_matches_closed_form():
    assert refractive_index(SCHOTT_BK7, 0.55) == pytest.approx(BK7_AT_550, abs=1e-14)


@pytest.mark.parametrize("material", [SCHOTT_BK7, BK7])
def test_normal_dispersion_is_monotone(material):
    lams = np.linspace(0.4, 0.7, 31)
    n = np.array([refractive_index(material, l) for l in lams])
    assert np.all(n > 1)
    assert np.all(np.diff(n) < 0)


def test_unknown_model_rejected():
    with pytest.raises(ConfigurationError):
        Material("x", "schott", (1.0,))


def test_wavelength_out_of_range():
    with pytest.raises(ConfigurationError):
        refractive_index(AIR, 1.5)


def test_plane_sag_and_normal():
    s = SurfaceSpec("refractive", 5.0, thickness=1.0)
    x = torch.tensor([0.0, 1.0, -2.0])
    y = torch.tensor([0.0, 3.0, 1.5])
    assert torch.equal(surface_sag(s, x, y), torch.zeros(3))
    n = surface_normal(s, x, y)
    assert torch.allclose(n, torch.tensor([0.0, 0.0, 1.0]).expand(3, 3))


def test_sphere_sag_closed_form():
    s = SurfaceSpec("refractive", 20.0, thickness=1.0, curvature=1 / 100)
    z = float(surface_sag(s, 10.0, 0.0))
    assert z == pytest.approx(0.501256289338004527, abs=1e-13)


@given(st.floats(0.0, 4.0), st.floats(0.01, 0.2))
def test_parabola_identity(r, c):
    s = SurfaceSpec("refractive", 5.0, thickness=1.0, curvature=c, conic=-1.0)
    assert float(surface_sag(s, r, 0.0)) == pytest.approx(c * r * r / 2, rel=1e-13, abs=1e-15)


def _asphere():
    return SurfaceSpec(
        "refractive", 3.0, thickness=1.0, curvature=1 / 12.0, conic=-0.7, asphere=(1e-4, -2e-6, 3e-8)
    )


def test_sag_normal_consistency():
    s = _asphere()
    rng = np.random.default_rng(1)
    r = 3.0 * np.sqrt(rng.random(100))
    t = rng.random(100) * 2 * np.pi
    x = torch.tensor(r * np.cos(t))
    y = torch.tensor(r * np.sin(t))
    h = 1e-6
    zx = (surface_sag(s, x + h, y) - surface_sag(s, x - h, y)) / (2 * h)
    zy = (surface_sag(s, x, y + h) - surface_sag(s, x, y - h)) / (2 * h)
    fd = torch.stack([-zx, -zy, torch.ones_like(zx)], -1)
    fd = fd / torch.linalg.norm(fd, dim=-1, keepdim=True)
    n = surface_normal(s, x, y)
    assert float(torch.linalg.norm(n - fd, dim=-1).max()) <= 1e-8


@given(st.floats(0.0, 3.0), st.floats(0.0, 2 * math.pi))
def test_rotational_symmetry(r, t):
    s = _asphere()
    a = float(surface_sag(s, r * math.cos(t), r * math.sin(t)))
    b = float(surface_sag(s, r, 0.0))
    assert a == pytest.approx(b, abs=1e-14)


def test_asphere_order_capped():
    with pytest.raises(ConfigurationError):
        SurfaceSpec("refractive", 1.0, thickness=1.0, asphere=(0.0,) * 6)


def test_complex_sag_rejected():
    with pytest.raises(ConfigurationError):
        SurfaceSpec("refractive", 10.0, thickness=1.0, curvature=1 / 5.0)


def _surfaces(**kw):
    return [
        SurfaceSpec("stop", 1.0),
        SurfaceSpec("refractive", 2.0, thickness=2.0, material=BK7, curvature=0.05),
        SurfaceSpec("refractive", 2.0, thickness=10.0),
        SurfaceSpec("doe-plane", 2.0, thickness=5.0),
        SurfaceSpec("sensor", 2.0),
    ]


def test_lens_structure_checks():
    LensSystem(_surfaces())
    s = _surfaces()
    with pytest.raises(ConfigurationError):
        LensSystem(s[1:])  # no stop
    with pytest.raises(ConfigurationError):
        LensSystem([s[0], s[3], s[1], s[2], s[4]])  # DOE before the glass
    with pytest.raises(ConfigurationError):
        LensSystem(s[:-1])  # no sensor


@pytest.mark.parametrize("name", sorted(DESIGNS))
def test_bundled_prescriptions_match_designs(name):
    assert fixture_lens(name) == design_lens(name)


@pytest.mark.parametrize("name", sorted(DESIGNS))
def test_lens_file_round_trip(name, tmp_path):
    lens = fixture_lens(name)
    p = tmp_path / "lens.json"
    save_lens(lens, p)
    again = load_lens(p)
    assert again == lens
    save_lens(again, tmp_path / "again.json")
    assert json.loads(p.read_text()) == json.loads((tmp_path / "again.json").read_text())


def test_unknown_surface_field(tmp_path):
    d = fixture_lens("singlet").to_dict()
    d["surfaces"][1]["radius"] = 3.0
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    with pytest.raises(ConfigurationError):
        load_lens(p)


def test_missing_lens_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_lens(tmp_path / "nope.json")


def test_sensor_distance_update():
    lens = fixture_lens("asphere")
    moved = lens.with_sensor_distance(3.5)
    assert moved.sensor_distance == 3.5
    assert moved.z_positions[-1] == pytest.approx(lens.z_positions[-1] - lens.sensor_distance + 3.5)
    assert isinstance(lens.sensor, SensorSpec)

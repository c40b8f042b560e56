import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from raywave.errors import ConfigurationError, ModelInapplicableError
from raywave.fixtures import singlet_scenario
from raywave.reference import (
    focal_distances,
    grating_ray_psf,
    ncc,
    oracle_psf,
    paraxial_achromat_doe,
    paraxial_focus,
    relative_l2,
    thinlens_fixtures,
    write_compare_csv,
)


@pytest.fixture(scope="module")
def fixtures():
    return {f.name: f for f in thinlens_fixtures()}


@given(st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_ncc_affine_invariance(a, b):
    x = np.random.default_rng(0).random(50)
    assert ncc(a * x + b, x) == pytest.approx(1.0, abs=1e-12)


def test_relative_l2():
    ref = np.array([3.0, 4.0])
    assert relative_l2(ref, ref) == 0.0
    assert relative_l2(np.array([3.0, 4.5]), ref) == pytest.approx(0.1)


def test_thin_lens_focus(fixtures):
    fx = fixtures["aperture"]
    assert paraxial_focus(fx.lens(), 0.55) == pytest.approx(100.0, rel=1e-6)


def test_diffractive_lens_power(fixtures):
    fx = fixtures["kinoform"]
    # Drop the spherical term: a pure 400 mm diffractive lens behind a 100 mm lens.
    lens_only = replace(fx.doe, coeffs=(fx.doe.coeffs[0], 0.0))
    s = paraxial_focus(fx.lens(), 0.55, lens_only)
    assert s == pytest.approx(1 / (1 / 100 + 1 / 400), rel=1e-5)


def test_paraxial_achromat_closed_form():
    tpl = singlet_scenario().doe
    focal = {0.46: 98.0, 0.55: 99.0, 0.62: 100.0}
    doe = paraxial_achromat_doe(focal, tpl)
    p0 = 0.55 * (100.0 - 98.0) / (100.0 * 98.0 * (0.62 - 0.46))
    assert doe.coeffs[0] == pytest.approx(-math.pi * p0 * tpl.half_diagonal**2 / 0.55e-3, rel=1e-12)
    assert doe.coeffs[1:] == (0.0,) * (len(tpl.coeffs) - 1)
    # The exit vergences at the extreme wavelengths now agree.
    v = [1 / focal[l] + p0 * l / 0.55 for l in (0.46, 0.62)]
    assert v[0] == pytest.approx(v[1], rel=1e-12)


def test_paraxial_achromat_degenerate():
    tpl = singlet_scenario().doe
    assert paraxial_achromat_doe({0.46: 50.0, 0.62: 50.0}, tpl).coeffs == (0.0,) * len(tpl.coeffs)
    with pytest.raises(ConfigurationError):
        paraxial_achromat_doe({0.55: 50.0}, tpl)


def test_paraxial_achromat_reduces_separation():
    sc = singlet_scenario()
    f0 = focal_distances(sc.lens, (0.46, 0.62))
    doe = paraxial_achromat_doe(f0, sc.doe)
    f1 = focal_distances(sc.lens, (0.46, 0.62), doe)
    assert abs(f1[0.62] - f1[0.46]) < 0.05 * abs(f0[0.62] - f0[0.46])


def test_oracle_patch_normalized(fixtures):
    res = oracle_psf(fixtures["aperture"])
    assert float(res.patch.sum()) == pytest.approx(1.0, abs=1e-12)
    w = res.patch.shape[-1]
    assert int(res.patch.argmax()) in {(w // 2 - a) * w + w // 2 - b for a in (0, 1) for b in (0, 1)}


def test_grating_inapplicable_on_quantized(fixtures):
    with pytest.raises(ModelInapplicableError):
        grating_ray_psf(fixtures["quantized16"], spp=1000)


def test_compare_csv(tmp_path):
    row = {"fixture": "x", "raywave_ncc": 0.99, "raywave_rel_l2": 0.01, "grating_ncc": "inapplicable", "grating_rel_l2": "inapplicable"}
    p = tmp_path / "v.csv"
    write_compare_csv(p, [row])
    lines = p.read_text().splitlines()
    assert lines[0] == "fixture,raywave_ncc,raywave_rel_l2,grating_ncc,grating_rel_l2"
    assert lines[1].endswith("inapplicable,inapplicable")

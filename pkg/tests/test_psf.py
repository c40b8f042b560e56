import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from raywave.errors import ConfigurationError
from raywave.fixtures import edof_scenario, gradient_scenario
from raywave.psf import (
    PsfStack,
    build_stack,
    compute_psf,
    crop_valid,
    fov_grid,
    rgb_wavelengths,
    sensor_coordinates,
    sensor_position,
    sensor_resample,
)
from raywave.tracing import SourceSpec


@pytest.fixture(scope="module")
def small():
    sc = gradient_scenario("even")
    return sc


def test_patch_is_normalized(small):
    src = SourceSpec(spp=small.spp, depth=small.depths[0])
    res = compute_psf(small.lens, small.doe, src, small.grid)
    p = res.patch
    assert p.shape == (small.grid.psf_window,) * 2
    assert float(p.min()) >= 0
    assert float(p.sum()) == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= res.spill < 0.05


def test_peak_sits_at_window_center(small):
    src = SourceSpec(spp=small.spp, depth=small.depths[0])
    res = compute_psf(small.lens, replace(small.doe, coeffs=(0.0,) * 4), src, small.grid)
    w = small.grid.psf_window
    i, j = np.unravel_index(int(res.patch.argmax()), res.patch.shape)
    assert abs(i - w // 2) <= 1 and abs(j - w // 2) <= 1


def test_seeded_psf_is_deterministic(small):
    src = SourceSpec(spp=small.spp, depth=small.depths[0])
    a = compute_psf(small.lens, small.doe, src, small.grid, seed=5).patch
    b = compute_psf(small.lens, small.doe, src, small.grid, seed=5).patch
    assert torch.equal(a, b)


def test_fov_grid_orientation():
    fovs, shape = fov_grid(4.0, 3)
    assert shape == (3, 3) and len(fovs) == 9
    a = 4.0 / math.sqrt(2)
    assert fovs[0] == pytest.approx((a, a))
    assert fovs[4] == pytest.approx((0.0, 0.0))
    assert fovs[8] == pytest.approx((-a, -a))
    assert math.hypot(*fovs[2]) == pytest.approx(4.0)
    assert fov_grid(2.0, 1) == ([(0.0, 0.0)], (1, 1))


def test_rgb_wavelengths():
    lams = rgb_wavelengths()
    assert len(lams) == 9 and min(lams) == pytest.approx(0.44) and max(lams) == pytest.approx(0.64)


def test_reference_wavelength_keeps_lateral_color():
    sc = edof_scenario()
    grid = replace(sc.grid, psf_window=32)
    src = dict(field=(0.0, 0.3), spp=20_000, depth=sc.depths[-1])
    ref = [compute_psf(sc.lens, sc.doe, SourceSpec(wavelength=l, **src), grid).center for l in (0.46, 0.62)]
    assert ref[0] == ref[1]
    own_grid = replace(grid, reference_wavelength=None)
    own = [compute_psf(sc.lens, sc.doe, SourceSpec(wavelength=l, **src), own_grid).center for l in (0.46, 0.62)]
    assert own[0] != own[1]


@given(st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_sensor_coordinates_round_trip(x, y):
    sc = gradient_scenario()
    r, c = sensor_coordinates(sc.lens.sensor, x, y)
    assert sensor_position(sc.lens.sensor, r, c) == pytest.approx((x, y), abs=1e-12)


def test_sensor_resample_conserves_energy():
    img = torch.rand(64, 64, dtype=torch.float64)
    out = sensor_resample(img, 2.0, 8.0)
    assert out.shape == (16, 16)
    assert float(out.sum()) == pytest.approx(float(img.sum()), rel=1e-14)
    with pytest.raises(ConfigurationError):
        sensor_resample(img, 3.0, 8.0)


def test_crop_spill():
    img = torch.zeros(20, 20, dtype=torch.float64)
    img[10, 10] = 3.0
    img[0, 0] = 1.0
    patch, spill = crop_valid(img, (0, 0), (10.2, 9.8), 4)
    assert patch[2, 2] == 3.0
    assert spill == pytest.approx(0.25)


def test_stack_round_trip_and_threads(tmp_path, small):
    fovs, shape = fov_grid(0.02, 2)
    lams = [0.5, 0.55, 0.6]
    kw = dict(grid=small.grid, spp=small.spp, depths=small.depths, fov_shape=shape, seed=1)
    a = build_stack(small.lens, small.doe, fovs, lams, threads=1, **kw)
    b = build_stack(small.lens, small.doe, fovs, lams, threads=3, **kw)
    assert np.array_equal(a.patches, b.patches)
    a.save(tmp_path / "s")
    assert len(list((tmp_path / "s").glob("*.pfm"))) == 12
    c = PsfStack.load(tmp_path / "s")
    assert np.array_equal(c.patches, a.patches.astype(np.float32))
    assert c.fov_shape == (2, 2) and c.wavelengths == lams


def test_channel_kernels(small):
    fovs = [(0.0, 0.0)]
    st_ = build_stack(small.lens, small.doe, fovs, [0.46, 0.55, 0.62], small.depths, small.grid, spp=small.spp)
    k = st_.channel_kernels()
    assert k.shape == (1, 3, small.grid.psf_window, small.grid.psf_window)
    assert np.allclose(k.sum(axis=(-2, -1)), 1.0)
    bad = build_stack(small.lens, small.doe, fovs, [0.55, 0.56], small.depths, small.grid, spp=small.spp)
    with pytest.raises(ConfigurationError):
        bad.channel_kernels()


def test_fov_shape_validated():
    with pytest.raises(ConfigurationError):
        PsfStack([(0, 0)] * 3, [0.55], [math.inf], np.zeros((3, 1, 1, 4, 4)), np.zeros((3, 1, 1, 2)), np.zeros((3, 1, 1)), (2, 2))


def test_single_field_sample_lights_one_pixel():
    img = torch.zeros(32, 32, dtype=torch.float64)
    img[13, 6] = 2.5
    out = sensor_resample(img, 2.0, 8.0)
    assert int((out != 0).sum()) == 1 and float(out[3, 1]) == 2.5

import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from raywave.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "demos" / "configs"
FAST = ["--spp", "5000"]


def _run(*argv):
    return main([str(a) for a in argv])


def _pfm_bytes(out):
    return {p.name: p.read_bytes() for p in sorted((out / "psf").glob("*.pfm"))}


@pytest.fixture(scope="module")
def psf_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("psf") / "a"
    assert _run("psf", "--config", CONFIGS / "psf_asphere.json", "--out", out, *FAST) == 0
    return out


def test_psf_writes_grid_of_pfms(psf_run):
    pfms = list((psf_run / "psf").glob("*.pfm"))
    assert len(pfms) == 12  # 2×2 fields × 3 wavelengths
    assert (psf_run / "montage.png").is_file()
    m = json.loads((psf_run / "manifest.json").read_text())
    for key in ("command", "version", "seed", "threads", "config_hash", "config", "outputs", "entries"):
        assert key in m
    assert m["command"] == "psf" and m["seed"] == 0 and len(m["entries"]) == 12
    assert all(f in m["outputs"] for f in (e["file"] for e in m["entries"]))


def test_rerun_from_manifest_is_bit_identical(psf_run, tmp_path):
    manifest = psf_run / "manifest.json"
    for threads in (1, 3):
        out = tmp_path / f"t{threads}"
        assert _run("psf", "--config", manifest, "--out", out, "--threads", threads) == 0
        assert _pfm_bytes(out) == _pfm_bytes(psf_run)
        assert json.loads((out / "manifest.json").read_text())["config_hash"] == json.loads(manifest.read_text())["config_hash"]


def test_seed_changes_output(psf_run, tmp_path):
    assert _run("psf", "--config", psf_run / "manifest.json", "--out", tmp_path / "s", "--seed", 7) == 0
    assert _pfm_bytes(tmp_path / "s") != _pfm_bytes(psf_run)


def test_environment_overrides(tmp_path, monkeypatch):
    monkeypatch.setenv("RAYWAVE_OUT", str(tmp_path / "env"))
    monkeypatch.setenv("RAYWAVE_THREADS", "2")
    assert _run("optimize", "--config", CONFIGS / "optimize_zero.json") == 0
    m = json.loads((tmp_path / "env" / "manifest.json").read_text())
    assert m["threads"] == 2
    assert _run("optimize", "--config", CONFIGS / "optimize_zero.json", "--out", tmp_path / "flag") == 0
    assert (tmp_path / "flag" / "manifest.json").is_file()


def test_optimize_zero_iterations_echoes_input(tmp_path):
    out = tmp_path / "o"
    assert _run("optimize", "--config", CONFIGS / "optimize_zero.json", "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["loss_before"] == rep["loss_after"]
    assert rep["params_after"]["values"] == rep["params_before"] == [1.0, -0.5]
    assert len((out / "trajectory.csv").read_text().splitlines()) == 2
    doe = json.loads((out / "doe.json").read_text())
    assert doe["coeffs"] == [1.0, -0.5]


def test_optimize_trajectory_is_seeded(tmp_path):
    cfg = json.loads((CONFIGS / "optimize_zero.json").read_text())
    cfg["optimize"]["iterations"] = 3
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    hashes = []
    for name in ("a", "b"):
        assert _run("optimize", "--config", path, "--out", tmp_path / name) == 0
        hashes.append(json.loads((tmp_path / name / "manifest.json").read_text())["trajectory_hash"])
    assert hashes[0] == hashes[1]
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()


def test_render_delta_is_identity(tmp_path):
    out = tmp_path / "r"
    assert _run("render", "--config", CONFIGS / "render_delta.json", "--out", out) == 0
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert [r["name"] for r in rows] == ["raw", "reconstructed"]
    assert float(rows[0]["psnr"]) == 99.0 and float(rows[0]["ssim"]) == pytest.approx(1.0)
    assert (out / "raw.png").is_file() and (out / "reconstructed.png").is_file()


def test_render_with_saved_stack(psf_run, tmp_path):
    cfg = {"render": {"image": "skimage:coffee", "image_size": 64, "psf": "stack", "stack": str(psf_run / "psf")}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert _run("render", "--config", path, "--out", tmp_path / "r") == 0
    rows = list(csv.DictReader((tmp_path / "r" / "metrics.csv").open()))
    assert float(rows[0]["psnr"]) < 99.0


def test_validate_rows(tmp_path):
    out = tmp_path / "v"
    assert _run("validate", "--config", CONFIGS / "validate.json", "--out", out, "--spp", 20000) == 0
    rows = list(csv.DictReader((out / "validate.csv").open()))
    assert [r["fixture"] for r in rows] == ["aperture", "kinoform", "quantized16"]
    assert rows[2]["grating_ncc"] == "inapplicable"
    assert all(float(r["raywave_ncc"]) > 0.9 for r in rows)
    assert (out / "quantized16_oracle.pfm").is_file() and not (out / "quantized16_grating.pfm").exists()


@pytest.mark.parametrize(
    "config",
    [
        None,
        {"lens": "no-such-lens"},
        {"lens": "missing.json"},
        {"grid": {"field_pitch_um": 8.0}, "scene": {"spp": 100}},
        {"seed": "abc"},
    ],
)
def test_configuration_errors_exit_2(tmp_path, config):
    if config is None:
        argv = ["psf", "--config", tmp_path / "absent.json"]
    else:
        path = tmp_path / "c.json"
        path.write_text(json.dumps(config))
        argv = ["psf", "--config", path]
    assert _run(*argv, "--out", tmp_path / "o") == 2


def test_render_without_image_exits_2(tmp_path):
    assert _run("render", "--out", tmp_path / "o") == 2


def test_simulation_error_exits_3(tmp_path):
    cfg = {"lens": "asphere", "scene": {"fovs": [[0.0, 60.0]], "wavelengths": [0.55], "spp": 2000}}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert _run("psf", "--config", path, "--out", tmp_path / "o") == 3


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "raywave", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("psf", "validate", "optimize", "render"):
        assert cmd in r.stdout

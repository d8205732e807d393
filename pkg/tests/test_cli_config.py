import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nvaperture import cli
from nvaperture.config import PRESETS, RunConfig, load_config, parse_text
from nvaperture.emitter_mc import PhotonStream
from nvaperture.errors import ConfigurationError

from _shared import fano_factor

BARE_CFG = {"geometry": {"variant": "bare_post", "post_radius_top_nm": 50.0},
            "analysis": {"dipole": {"depth_nm": 20.0}}}


def _write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    return str(p)


def _run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _headline(out):
    return json.loads(out.strip().splitlines()[-1])


def _assert_csv_headers(root):
    for p in root.glob("*.csv"):
        first = p.read_text().splitlines()[0].split(",")
        assert all(not _is_number(c) for c in first), p.name


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


# ------------------------------------------------------------------ config errors

def test_malformed_json_exits_2_without_outputs(tmp_path, capsys):
    cfg = _write(tmp_path, "bad.json", '{"geometry": {')
    out = tmp_path / "out"
    code, _, err = _run(["simulate", "--config", cfg, "--out", out], capsys)
    assert code == 2
    assert not out.exists()
    assert json.loads(err.strip().splitlines()[-1])["exit_code"] == 2


@pytest.mark.parametrize("doc", [
    {"geometry": {"radius": 50}},
    {"colour": "blue"},
    {"schema_version": 99},
    {"solver": {"preset": "ultra"}},
    {"geometry": {"post_radius_top_nm": "fifty"}},
    {"analysis": {"dipole": {"depth_nm": True}}},
])
def test_strict_schema_rejects(tmp_path, capsys, doc):
    code, _, err = _run(["simulate", "--config", _write(tmp_path, "c.json", doc),
                         "--out", tmp_path / "o"], capsys)
    assert code == 2 and "ConfigurationError" in err
    assert not (tmp_path / "o").exists()


def test_zero_duration_emit_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path, "c.json", {"emitter": {"duration_s": 0.0}})
    code, _, _ = _run(["emit", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 2


def test_unknown_sweep_param_exits_2(tmp_path, capsys):
    code, _, _ = _run(["sweep", "--param", "height", "--values", "1,2", "--out", tmp_path / "o"],
                      capsys)
    assert code == 2
    code, _, _ = _run(["sweep", "--param", "radius", "--values", "a,b", "--out", tmp_path / "o"],
                      capsys)
    assert code == 2


def test_bad_flags_exit_2(tmp_path, capsys):
    assert _run(["emit", "--workers", "0"], capsys)[0] == 2
    assert _run(["frobnicate"], capsys)[0] == 2
    assert _run(["analyze", "g2", tmp_path / "missing.bin"], capsys)[0] == 2


# ------------------------------------------------------------------ config model

@given(radius=st.floats(20, 120), seed=st.integers(0, 2**31), preset=st.sampled_from(sorted(PRESETS)),
       depth=st.one_of(st.just("field_maximum"), st.floats(5, 170)))
def test_effective_config_round_trips(radius, seed, preset, depth):
    cfg = load_config(preset=preset, overrides={"seed": seed, "geometry": {"post_radius_top_nm": radius},
                                                "analysis": {"dipole": {"depth_nm": depth}}})
    again = RunConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg and again.digest() == cfg.digest()
    assert cfg.solver.cell_size_nm is not None and cfg.geometry.post_radius_bottom_nm is not None


def test_toml_and_json_agree(tmp_path):
    j = _write(tmp_path, "c.json", {"seed": 7, "geometry": {"variant": "bare_post"},
                                    "emitter": {"mode": "pulsed", "duration_s": 0.5}})
    t = tmp_path / "c.toml"
    t.write_text('seed = 7\n[geometry]\nvariant = "bare_post"\n'
                 '[emitter]\nmode = "pulsed"\nduration_s = 0.5\n')
    assert load_config(j).digest() == load_config(str(t)).digest()
    with pytest.raises(ConfigurationError):
        parse_text("seed = = 3", "toml")


# ------------------------------------------------------------------ simulate / sweep

def test_simulate_homogeneous_is_unity(tmp_path, capsys):
    cfg = _write(tmp_path, "c.json", {"geometry": {"variant": "homogeneous"}})
    code, out, _ = _run(["simulate", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 0
    rows = list(csv.reader((tmp_path / "o" / "spectrum.csv").open()))
    assert rows[0] == ["wavelength_nm", "enhancement"]
    F = np.array([float(r[1]) for r in rows[1:]])
    assert np.all((F >= 0.95) & (F <= 1.05))
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    for name, digest in man["artifacts"].items():
        assert cli.sha256_file(tmp_path / "o" / name) == digest
    echo = json.loads((tmp_path / "o" / "effective_config.json").read_text())
    assert echo["solver"]["cell_size_nm"] == 10.0
    _assert_csv_headers(tmp_path / "o")


def test_simulate_r50_preset_in_band(tmp_path, capsys):
    code, out, _ = _run(["simulate", "--preset", "fig1d_r50", "--out", tmp_path / "o"], capsys)
    assert code == 0
    h = _headline(out)
    assert 640 <= h["peak_wavelength_nm"] <= 730
    assert 15 <= h["peak_enhancement"] <= 60
    for name in ("mode_profile_xz.csv", "mode_profile_axis.csv", "field_scan.csv", "mode_volume.json"):
        assert (tmp_path / "o" / name).exists()
    _assert_csv_headers(tmp_path / "o")


def test_single_value_sweep_matches_simulate(tmp_path, capsys):
    cfg = _write(tmp_path, "c.json", BARE_CFG)
    assert _run(["simulate", "--config", cfg, "--out", tmp_path / "s"], capsys)[0] == 0
    assert _run(["sweep", "--config", cfg, "--param", "depth", "--values", "20",
                 "--out", tmp_path / "w"], capsys)[0] == 0
    a = (tmp_path / "s" / "spectrum.csv").read_bytes()
    b = (tmp_path / "w" / "spectrum_depth_20.csv").read_bytes()
    assert a == b
    _assert_csv_headers(tmp_path / "w")


def test_orientation_sweep_reports_min_max(tmp_path, capsys):
    cfg = _write(tmp_path, "c.json", BARE_CFG)
    code, out, _ = _run(["sweep", "--config", cfg, "--param", "orientation",
                         "--values", "0,15,30,45,60,75,90", "--out", tmp_path / "o"], capsys)
    assert code == 0
    h = _headline(out)
    rows = list(csv.reader((tmp_path / "o" / "sweep_summary.csv").open()))
    assert rows[0] == ["polar_deg", "peak_F", "peak_lambda_nm", "avg_F"] and len(rows) == 8
    avg = [float(r[3]) for r in rows[1:]]
    assert h["min_avg_F"] == pytest.approx(min(avg), rel=1e-8)
    assert h["max_avg_F"] == pytest.approx(max(avg), rel=1e-8)


def test_radius_sweep_red_shifts(tmp_path, capsys):
    code, out, _ = _run(["sweep", "--preset", "fig1d_r50", "--param", "radius",
                         "--values", "50,55,65", "--out", tmp_path / "o"], capsys)
    assert code == 0
    rows = list(csv.reader((tmp_path / "o" / "sweep_summary.csv").open()))
    assert len(rows) == 4
    lam = [float(r[2]) for r in rows[1:]]
    assert lam[0] < lam[1] < lam[2]


# ------------------------------------------------------------------ emit

def test_emit_is_deterministic(tmp_path, capsys):
    argv = ["emit", "--preset", "fig3_bulk", "--seed", "11"]
    cfg = _write(tmp_path, "c.json", {"emitter": {"duration_s": 0.5}})
    for d in ("a", "b"):
        assert _run(argv + ["--config", cfg, "--out", tmp_path / d], capsys)[0] == 0
    assert (tmp_path / "a" / "stream.bin").read_bytes() == (tmp_path / "b" / "stream.bin").read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["manifest_sha256"] == mb["manifest_sha256"]
    assert ma["artifacts"] == mb["artifacts"]
    assert _run(["emit", "--preset", "fig3_bulk", "--seed", "12", "--config", cfg,
                 "--out", tmp_path / "c"], capsys)[0] == 0
    assert (tmp_path / "c" / "stream.bin").read_bytes() != (tmp_path / "a" / "stream.bin").read_bytes()


def test_emit_bulk_cw_rate_matches_steady_state(tmp_path, capsys):
    cfg_doc = {"emitter": {"mode": "cw", "duration_s": 0.2, "pump_mW": 1.0}}
    code, out, _ = _run(["emit", "--preset", "fig3_bulk", "--config",
                         _write(tmp_path, "c.json", cfg_doc), "--out", tmp_path / "o"], capsys)
    assert code == 0
    h = _headline(out)
    cfg = load_config(tmp_path / "c.json", "fig3_bulk")
    model = cfg.emitter_model()
    R, T = h["analytic_rate_cps"], 0.2
    sigma = math.sqrt(R * T * fano_factor(model, 1.0)) / T
    assert abs(h["mean_rate_cps"] - R) < 3 * sigma
    assert model.lifetime == pytest.approx(16.7e-9, rel=1e-9)


# ------------------------------------------------------------------ analyze

def test_analyze_g2_single_emitter(tmp_path, capsys):
    cfg = _write(tmp_path, "c.json", {"emitter": {"mode": "cw", "duration_s": 0.5, "pump_mW": 0.5},
                                      "analysis": {"g2_bin_ns": 1.0, "g2_window_ns": 100.0}})
    assert _run(["emit", "--config", cfg, "--out", tmp_path / "e"], capsys)[0] == 0
    code, out, _ = _run(["analyze", "g2", tmp_path / "e" / "stream.bin", "--config", cfg,
                         "--out", tmp_path / "a"], capsys)
    assert code == 0
    assert _headline(out)["g2_at_zero"] < 0.5
    fit = json.loads((tmp_path / "a" / "fit.json").read_text())
    assert fit["converged"]
    _assert_csv_headers(tmp_path / "a")


def test_analyze_lifetime_bulk(tmp_path, capsys):
    assert _run(["emit", "--preset", "fig3_bulk", "--out", tmp_path / "e"], capsys)[0] == 0
    code, out, _ = _run(["analyze", "lifetime", tmp_path / "e" / "stream.bin", "--preset",
                         "fig3_bulk", "--out", tmp_path / "a"], capsys)
    assert code == 0
    assert _headline(out)["tau_ns"] == pytest.approx(16.7, rel=0.02)


def test_analyze_saturation_silver_preset(tmp_path, capsys):
    assert _run(["emit", "--preset", "fig3e_ag", "--out", tmp_path / "e"], capsys)[0] == 0
    code, out, _ = _run(["analyze", "saturation", tmp_path / "e" / "saturation.csv",
                         "--out", tmp_path / "a"], capsys)
    assert code == 0
    h = _headline(out)
    assert h["I_sat_cps"] == pytest.approx(1.01e5, rel=0.03)
    assert h["P_sat_mW"] == pytest.approx(1.18, rel=0.03)
    _assert_csv_headers(tmp_path / "e")
    _assert_csv_headers(tmp_path / "a")


def test_analyze_spectra_and_repeatable_manifest(tmp_path, capsys):
    assert _run(["emit", "--preset", "fig4b_odmr", "--out", tmp_path / "e"], capsys)[0] == 0
    digests = []
    for d in ("a", "b"):
        code, out, _ = _run(["analyze", "odmr", tmp_path / "e" / "odmr_0.csv", "--out", tmp_path / d],
                            capsys)
        assert code == 0
        assert _headline(out)["f0_GHz"] == pytest.approx(2.87, rel=0.02)
        digests.append(json.loads((tmp_path / d / "manifest.json").read_text())["manifest_sha256"])
    assert digests[0] == digests[1]
    assert _run(["emit", "--preset", "fig4a_fano", "--out", tmp_path / "f"], capsys)[0] == 0
    code, out, _ = _run(["analyze", "fano", tmp_path / "f" / "fano_2.csv", "--out", tmp_path / "g"],
                        capsys)
    assert code == 0 and _headline(out)["lambda0_nm"] == pytest.approx(715.0, abs=1.0)


def test_analyze_unreadable_stream_exits_2(tmp_path, capsys):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"not a stream")
    assert _run(["analyze", "g2", p, "--out", tmp_path / "o"], capsys)[0] == 2


def test_output_root_from_environment(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "root"))
    cfg = _write(tmp_path, "c.json", {"emitter": {"mode": "odmr", "centers": [2.87]}})
    code, out, _ = _run(["emit", "--config", cfg], capsys)
    assert code == 0
    assert _headline(out)["output"].startswith(str(tmp_path / "root"))


# ------------------------------------------------------------------ validate

def test_validate_passes(tmp_path, capsys):
    code, out, _ = _run(["validate", "--out", tmp_path / "v"], capsys)
    assert code == 0, out
    rep = json.loads((tmp_path / "v" / "validation.json").read_text())
    assert rep["passed"] and rep["wall_time_s"] <= 60


def test_validate_detects_permittivity_perturbation(capsys):
    code, out, err = _run(["validate", "--perturb-permittivity", "0.1"], capsys)
    assert code == 5
    failures = json.loads(err.strip().splitlines()[-1])["failures"]
    assert "vacuum_normalization" in failures
    assert "mirror_symmetry" not in failures and "nested_boxes" not in failures

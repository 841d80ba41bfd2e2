import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

import main
import mapping
import pulse_fit
from main import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE
from pulse_fit import FitModel, TimeSeries

from conftest import RESOURCES, THICKNESS


def run(*args):
    return main.main([str(a) for a in args])


def write_config(tmp_path, **changes):
    lines = {
        "laser.wavelength": "532 nm",
        "laser.power": "10 mW",
        "laser.beam_diameter": "0.9 mm",
        "sample.thickness": "500 um",
        "rates": str(RESOURCES / "nv_rates.env"),
        "lens.catalog": str(RESOURCES / "lens_catalog.csv"),
        "sweep.points": "60",
    }
    lines.update(changes)
    path = tmp_path / "run.env"
    path.write_text("".join(f"{key} = {value}\n" for key, value in lines.items() if value is not None))
    return path


def test_design_with_shipped_config(tmp_path):
    assert run("--out", tmp_path, "design") == EXIT_OK
    report = json.loads((tmp_path / "design.json").read_text())
    assert report["twice_rayleigh_length_m"] == pytest.approx(THICKNESS, rel=0.05)
    assert report["focal_length_m"] == pytest.approx(17.3e-3, rel=0.05)
    assert report["recommended_lens"]["name"] == "AC254-019-A"
    assert report["volume_model"] == "clipped"
    for name in ("sweep.csv", "power_robustness.csv", "lens_candidates.csv"):
        assert (tmp_path / name).is_file()
    assert len(pd.read_csv(tmp_path / "power_robustness.csv")) == len(main.ROBUSTNESS_POWERS)


def test_design_with_single_lens_catalog(tmp_path):
    catalog = tmp_path / "one.csv"
    catalog.write_text("name,focal_length_mm,diameter_mm\nLA1805,30,25.4\n")
    config = write_config(tmp_path, **{"lens.catalog": catalog.name})
    assert run("--config", config, "--out", tmp_path / "out", "design") == EXIT_OK
    report = json.loads((tmp_path / "out" / "design.json").read_text())
    assert report["recommended_lens"]["name"] == "LA1805"
    assert report["recommended_lens"]["spot_diameter_m"] == pytest.approx(22.6e-6, rel=1e-3)


def test_missing_rate_file_is_an_input_error(tmp_path, capsys):
    config = write_config(tmp_path, rates="absent.env")
    assert run("--config", config, "--out", tmp_path / "out", "design") == EXIT_INPUT
    err = capsys.readouterr().err
    assert "absent.env" in err
    assert "rates" in err


def test_malformed_config_value(tmp_path, capsys):
    config = write_config(tmp_path, **{"laser.power": "ten milliwatts"})
    assert run("--config", config, "--out", tmp_path / "out", "sweep") == EXIT_INPUT
    assert "laser.power" in capsys.readouterr().err


def test_unknown_volume_model(tmp_path):
    config = write_config(tmp_path, volume_model="conical")
    assert run("--config", config, "--out", tmp_path / "out", "sweep") == EXIT_INPUT


def test_sweep_csv_is_reproducible(tmp_path):
    assert run("--out", tmp_path / "a", "sweep") == EXIT_OK
    assert run("--out", tmp_path / "b", "--threads", 3, "sweep") == EXIT_OK
    first = (tmp_path / "a" / "sweep.csv").read_bytes()
    assert first == (tmp_path / "b" / "sweep.csv").read_bytes()
    table = pd.read_csv(tmp_path / "a" / "sweep.csv")
    assert len(table) == 200
    assert list(table.columns)[:2] == ["variable", "volume_m3"]


def test_waist_sweep_with_overrides(tmp_path):
    args = ["--variable", "waist", "--points", 12, "--min", "1 um", "--max", "40 um", "--power", "1 mW"]
    assert run("--out", tmp_path, "sweep", *args) == EXIT_OK
    table = pd.read_csv(tmp_path / "sweep.csv")
    assert len(table) == 12
    assert table["variable"].iloc[0] == pytest.approx(1e-6)


def test_detection_proportion_sweep_writes_ratio(tmp_path):
    assert run("--out", tmp_path, "sweep", "--variable", "detection-proportion", "--points", 10) == EXIT_OK
    table = pd.read_csv(tmp_path / "cfm_ratio.csv")
    assert list(table.columns) == ["proportion", "cfm_focal_length_m", "cfm_waist_radius_m", "ratio"]
    assert len(table) == 10 * len(main.CFM_FOCAL_OCTAVES)
    assert table["cfm_focal_length_m"].nunique() == len(main.CFM_FOCAL_OCTAVES)
    assert table["ratio"].iloc[0] > table["ratio"].iloc[-1]
    thresholds = pd.read_csv(tmp_path / "cfm_threshold.csv")
    assert len(thresholds) == len(main.CFM_FOCAL_OCTAVES)
    assert thresholds["cfm_focal_length_m"].is_monotonic_increasing


def test_detection_proportion_sweep_with_chosen_cfm_focals(tmp_path):
    args = ["--variable", "detection-proportion", "--points", 4, "--cfm-focal", "7.2 mm", "--cfm-focal", "3.6 mm"]
    assert run("--out", tmp_path, "sweep", *args) == EXIT_OK
    table = pd.read_csv(tmp_path / "cfm_ratio.csv")
    assert sorted(table["cfm_focal_length_m"].unique()) == pytest.approx([3.6e-3, 7.2e-3])
    assert len(table) == 8


def test_bad_quantity_option_is_a_usage_error(tmp_path):
    assert run("--out", tmp_path, "sweep", "--min", "one micron") == EXIT_USAGE


def test_fit_command(tmp_path):
    model = FitModel.of("rabi")
    series = mapping.synth_map(mapping.gradient_field("rabi", nx=1, ny=1), 0.0, seed=0)[0][2]
    path = pulse_fit.write_time_series(tmp_path / "rabi_scan.csv", series)
    assert run("--out", tmp_path / "out", "fit", "--model", "rabi", path) == EXIT_OK
    result = pulse_fit.FitResult.from_json((tmp_path / "out" / "rabi_scan_rabi.json").read_text())
    assert result.converged
    assert pulse_fit.pi_time(result) == pytest.approx(100e-9, rel=1e-6)
    assert result.params.shape == (model.arity,)


def test_fit_command_with_bad_header(tmp_path, capsys):
    path = tmp_path / "scan.csv"
    path.write_text("t,y\n0,1\n1,2\n")
    assert run("--out", tmp_path, "fit", "--model", "t1", path) == EXIT_INPUT
    assert "scan.csv" in capsys.readouterr().err


def test_fit_command_with_wrong_init_arity(tmp_path):
    path = pulse_fit.write_time_series(tmp_path / "scan.csv", TimeSeries([0, 1, 2, 3, 4], [1.0, 0.6, 0.4, 0.3, 0.25]))
    assert run("--out", tmp_path, "fit", "--model", "t1", "--init", "1,2", path) == EXIT_USAGE


def test_simulate_then_map(tmp_path):
    data, maps = tmp_path / "data", tmp_path / "maps"
    assert run("--out", data, "--seed", 3, "simulate", "--model", "t2", "--noise", "0.01") == EXIT_OK
    assert len(pd.read_csv(data / "manifest.csv")) == 147
    assert run("--out", maps, "--threads", 2, "map", "--model", "t2", data) == EXIT_OK
    table = pd.read_csv(maps / "map.csv")
    assert list(table.columns) == ["x_um", "y_um", "value", "units"]
    assert len(table) == 147
    summary = json.loads((maps / "stats.json").read_text())
    assert summary["n_valid"] + summary["n_missing"] == 147
    assert summary["mean"] == pytest.approx(21.5e-6, rel=0.02)
    assert not (maps / "pulse_plan.csv").exists()


def test_rabi_map_writes_pulse_plan(tmp_path):
    truth = mapping.write_truth_field(tmp_path / "truth.csv", mapping.gradient_field("rabi", nx=2, ny=2))
    data, maps = tmp_path / "data", tmp_path / "maps"
    assert run("--out", data, "simulate", "--model", "rabi", "--truth", truth) == EXIT_OK
    assert run("--out", maps, "map", "--model", "rabi", data / "manifest.csv") == EXIT_OK
    plan = pd.read_csv(maps / "pulse_plan.csv", float_precision="round_trip")
    assert len(plan) == 4
    pd.testing.assert_series_equal(plan["pi_half_time_s"], plan["pi_time_s"] / 2, check_names=False)


def test_pulse_plan_from_rabi_map_drives_t2_simulation(tmp_path):
    rabi = mapping.gradient_field("rabi", nx=3, ny=4)
    t2 = replace(mapping.gradient_field("t2", nx=3, ny=4), pi_time=rabi.pi_time)
    rabi_truth = mapping.write_truth_field(tmp_path / "rabi_truth.csv", rabi)
    t2_truth = mapping.write_truth_field(tmp_path / "t2_truth.csv", t2)

    assert run("--out", tmp_path / "rabi", "simulate", "--model", "rabi", "--truth", rabi_truth) == EXIT_OK
    assert run("--out", tmp_path / "pi_map", "map", "--model", "rabi", tmp_path / "rabi") == EXIT_OK
    plan = tmp_path / "pi_map" / "pulse_plan.csv"
    args = ["simulate", "--model", "t2", "--truth", t2_truth, "--pulse-plan", plan]
    assert run("--out", tmp_path / "t2", *args) == EXIT_OK

    truth = pd.read_csv(tmp_path / "t2" / "truth.csv", float_precision="round_trip").round({"x_um": 6, "y_um": 6})
    planned = pd.read_csv(plan, float_precision="round_trip").round({"x_um": 6, "y_um": 6})
    joined = truth.merge(planned, on=["x_um", "y_um"], validate="one_to_one")
    assert len(joined) == 12
    np.testing.assert_array_equal(joined["applied_pi_time_s"], joined["pi_time_s_y"])
    np.testing.assert_allclose(truth["applied_pi_time_s"], truth["pi_time_s"], rtol=1e-6)

    assert run("--out", tmp_path / "t2_map", "map", "--model", "t2", tmp_path / "t2") == EXIT_OK
    summary = json.loads((tmp_path / "t2_map" / "stats.json").read_text())
    assert summary["n_missing"] == 0
    assert summary["mean"] == pytest.approx(21.5e-6, rel=1e-6)


@pytest.mark.parametrize("args", [
    ["--model", "t2", "--pi-time", "100 ns", "--applied-pi-time", "100 ns", "--pulse-plan", "plan.csv"],
    ["--model", "rabi", "--pulse-plan", "plan.csv"],
])
def test_pulse_plan_option_conflicts(tmp_path, args):
    assert run("--out", tmp_path, "simulate", *args) == EXIT_USAGE


def test_missing_pulse_plan_is_an_input_error(tmp_path):
    args = ["simulate", "--model", "t2", "--pulse-plan", tmp_path / "absent.csv"]
    assert run("--out", tmp_path / "out", *args) == EXIT_INPUT


def test_map_without_valid_pixels_is_numerical_failure(tmp_path):
    rows = ["file,x_um,y_um"]
    for index in range(2):
        pulse_fit.write_time_series(tmp_path / f"flat_{index}.csv", TimeSeries(range(10), [0.5] * 10))
        rows.append(f"flat_{index}.csv,{50 * index},0")
    (tmp_path / "manifest.csv").write_text("\n".join(rows) + "\n")
    assert run("--out", tmp_path / "maps", "map", "--model", "t1", tmp_path) == EXIT_NUMERICAL


def test_map_with_off_grid_pixels(tmp_path):
    series = TimeSeries(range(10), [1.0 / (1 + i) for i in range(10)])
    pulse_fit.write_time_series(tmp_path / "p.csv", series)
    (tmp_path / "manifest.csv").write_text("file,x_um,y_um\np.csv,0,0\np.csv,25,0\n")
    assert run("--out", tmp_path / "maps", "map", "--model", "t1", tmp_path) == EXIT_INPUT


def test_simulate_is_seeded(tmp_path):
    args = ["simulate", "--model", "t1", "--noise", "0.05", "--points", 20]
    assert run("--out", tmp_path / "a", "--seed", 42, *args) == EXIT_OK
    assert run("--out", tmp_path / "b", "--seed", 42, *args) == EXIT_OK
    for name in ("pixel_0000.csv", "pixel_0146.csv", "manifest.csv", "truth.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_global_pi_pulse(tmp_path):
    args = ["simulate", "--model", "t2", "--pi-time", "100 ns", "--applied-pi-time", "100 ns"]
    assert run("--out", tmp_path, *args) == EXIT_OK
    truth = pd.read_csv(tmp_path / "truth.csv", float_precision="round_trip")
    assert (truth["applied_pi_time_s"] == 100e-9).all()
    assert truth["pi_time_s"].nunique() == 21


def test_applied_pi_time_needs_true_pi_times(tmp_path):
    assert run("--out", tmp_path, "simulate", "--model", "t1", "--applied-pi-time", "100 ns") == EXIT_USAGE


@pytest.mark.parametrize("args", [["bogus"], ["fit", "scan.csv"], ["map", "--model", "t3", "."]])
def test_usage_errors(args):
    assert run(*args) == EXIT_USAGE


def test_version(capsys):
    assert run("--version") == EXIT_OK
    assert capsys.readouterr().out.strip() == main.get_version() == "1.0.0"


def test_relative_config_references_resolve_against_config_dir(tmp_path):
    (tmp_path / "rates.env").write_text((RESOURCES / "nv_rates.env").read_text())
    config = main.load_run_config(write_config(tmp_path, rates="rates.env", **{"pump.kappa": "0.01"}))
    assert config.rates_path == tmp_path / "rates.env"
    assert config.pump.coupling == 0.01
    assert config.sweep_points == 60
    assert config.output.name == "out"


def test_lens_radius_defaults_to_recommended_catalog_lens(tmp_path):
    catalog = tmp_path / "half_inch.csv"
    catalog.write_text("name,focal_length_mm,diameter_mm\nAC127-019-A,19,12.7\nAC127-030-A,30,12.7\n")
    config = main.load_run_config(write_config(tmp_path, **{"lens.catalog": catalog.name}))
    assert config.lens_radius == pytest.approx(6.35e-3)
    explicit = main.load_run_config(write_config(tmp_path, **{"lens.catalog": catalog.name, "lens.radius": "5 mm"}))
    assert explicit.lens_radius == 5e-3
    bare = main.load_run_config(write_config(tmp_path, **{"lens.catalog": None}))
    assert bare.catalog is None
    assert bare.lens_radius == main.DEFAULT_LENS_RADIUS

import json
import logging
import math
import random
from dataclasses import replace

import numpy as np
import pytest

import mapping
import pulse_fit
from mapping import UM, PixelMap, Quantity
from pulse_fit import FitModel, ModelKind, TimeSeries
from util import ConfigError, DomainError, MappingError, NoValidPixelsError, atomic_write_frame

T2 = FitModel(ModelKind.T2)


def test_stats_use_population_std():
    result = mapping.stats(PixelMap((0, 0), UM, [[0.0, 2.0]]))
    assert result.mean == 1.0
    assert result.std == 1.0
    assert (result.min, result.max) == (0.0, 2.0)


def test_stats_skip_missing_pixels():
    result = mapping.stats(PixelMap((0, 0), UM, [[1.0, math.nan], [3.0, math.nan]]))
    assert result.mean == 2.0
    assert result.n_valid == 2
    assert result.n_missing == 2


def test_stats_of_empty_map():
    with pytest.raises(NoValidPixelsError):
        mapping.stats(PixelMap((0, 0), UM, [[math.nan, math.nan]]))


def test_stats_scale_with_the_map():
    pixel_map = PixelMap((0, 0), UM, np.random.default_rng(0).uniform(1, 5, (4, 6)))
    base, doubled = mapping.stats(pixel_map), mapping.stats(pixel_map.scaled(2.0))
    assert doubled.mean == 2 * base.mean
    assert doubled.std == 2 * base.std
    assert doubled.max == 2 * base.max


def test_pixel_map_rejects_bad_grids():
    with pytest.raises(DomainError):
        PixelMap((0, 0), UM, [1.0, 2.0])
    with pytest.raises(DomainError):
        PixelMap((0, 0), 0.0, [[1.0]])


def test_single_pixel_rabi_map():
    truth = mapping.gradient_field("rabi", nx=1, ny=1, origin=(10 * UM, 20 * UM))
    pi_map = mapping.assemble(mapping.synth_map(truth, 0.0, seed=0), "rabi", 50 * UM)
    assert (pi_map.nx, pi_map.ny) == (1, 1)
    assert pi_map.origin == (10 * UM, 20 * UM)
    assert pi_map.quantity is Quantity.PI_TIME
    assert pi_map.values[0, 0] == pytest.approx(100e-9, rel=1e-6)


def test_t2_map_recovers_truth_at_one_percent_noise():
    truth = mapping.gradient_field("t2", nx=7, ny=21)
    t2_map = mapping.assemble(mapping.synth_map(truth, 0.01, seed=1), "t2", 50 * UM)
    assert (t2_map.nx, t2_map.ny) == (7, 21)
    assert t2_map.units == "s"
    error = np.abs(t2_map.values / truth.field_of("a2") - 1)
    assert np.count_nonzero(error < 0.02) >= 0.95 * error.size


def test_noiseless_t1_map_stats_match_truth():
    truth = mapping.gradient_field("t1", nx=5, ny=4, scatter=0.05, seed=2)
    t1_map = mapping.assemble(mapping.synth_map(truth, 0.0, seed=0), "t1", 50 * UM)
    expected = truth.field_of("a2")
    np.testing.assert_allclose(t1_map.values, expected, rtol=1e-6)
    result = mapping.stats(t1_map)
    assert result.mean == pytest.approx(np.mean(expected), rel=1e-6)
    assert result.std == pytest.approx(np.std(expected), rel=1e-4)


def test_failed_pixel_is_missing():
    truth = mapping.gradient_field("t2", nx=2, ny=2)
    records = mapping.synth_map(truth, 0.0, seed=0)
    x, y, series = records[3]
    records[3] = (x, y, TimeSeries(series.tau, np.full(len(series), 0.5)))
    t2_map = mapping.assemble(records, "t2", 50 * UM)
    assert math.isnan(t2_map.values[1, 1])
    assert mapping.stats(t2_map).n_missing == 1


def test_map_does_not_depend_on_record_order():
    truth = mapping.gradient_field("t1", nx=3, ny=4)
    records = mapping.synth_map(truth, 0.01, seed=5)
    shuffled = list(records)
    random.Random(0).shuffle(shuffled)
    assert mapping.assemble(shuffled, "t1", 50 * UM) == mapping.assemble(records, "t1", 50 * UM)


def test_threaded_assembly_matches_serial():
    records = mapping.synth_map(mapping.gradient_field("t2", nx=3, ny=3), 0.01, seed=6)
    assert mapping.assemble(records, "t2", 50 * UM, workers=4) == mapping.assemble(records, "t2", 50 * UM)


def test_coordinates_snap_to_grid():
    truth = mapping.gradient_field("t1", nx=2, ny=1)
    (x0, y0, s0), (x1, y1, s1) = mapping.synth_map(truth, 0.0, seed=0)
    t1_map = mapping.assemble([(x0, y0, s0), (x1 + 0.2 * UM, y1, s1)], "t1", 50 * UM)
    assert (t1_map.nx, t1_map.ny) == (2, 1)


def test_off_grid_record_is_rejected():
    series = mapping.synth_map(mapping.gradient_field("t1", nx=1, ny=1), 0.0, seed=0)[0][2]
    records = [(0.0, 0.0, series), (50 * UM, 0.0, series), (75 * UM, 0.0, series)]
    with pytest.raises(MappingError, match="off the"):
        mapping.assemble(records, "t1", 50 * UM)


def test_duplicate_record_is_rejected():
    series = mapping.synth_map(mapping.gradient_field("t1", nx=1, ny=1), 0.0, seed=0)[0][2]
    with pytest.raises(MappingError, match="duplicates"):
        mapping.assemble([(0.0, 0.0, series), (0.1 * UM, 0.0, series)], "t1", 50 * UM)


def test_custom_derive():
    records = mapping.synth_map(mapping.gradient_field("t2", nx=2, ny=2), 0.0, seed=0)
    exponent = mapping.assemble(records, "t2", 50 * UM, derive=lambda r: r.param("a3"), units="1")
    assert exponent.quantity is Quantity.CUSTOM
    np.testing.assert_allclose(exponent.values, 1.5, rtol=1e-6)


def test_synthetic_map_is_deterministic():
    truth = mapping.gradient_field("rabi", nx=2, ny=3)
    first = mapping.synth_map(truth, 0.02, seed=42)
    second = mapping.synth_map(truth, 0.02, seed=42)
    other = mapping.synth_map(truth, 0.02, seed=43)
    for (_, _, a), (_, _, b), (_, _, c) in zip(first, second, other):
        assert a == b
        assert not np.array_equal(a.signal, c.signal)


def test_noiseless_synthetic_map_is_the_model():
    truth = mapping.gradient_field("t1", nx=2, ny=2)
    tau = mapping.default_tau(truth)
    model = FitModel(ModelKind.T1)
    for ix, iy, (_, _, series) in zip([0, 0, 1, 1], [0, 1, 0, 1], mapping.synth_map(truth, 0.0, seed=0)):
        np.testing.assert_array_equal(series.signal, model.evaluate(tau, truth.params[ix, iy]))


def test_pixel_noise_is_keyed_by_pixel_index():
    small = mapping.gradient_field("t2", nx=2, ny=3, gradient=0.0)
    large = mapping.gradient_field("t2", nx=4, ny=3, gradient=0.0)
    tau = mapping.default_tau(small)
    a = mapping.synth_map(small, 0.01, seed=7, tau=tau)
    b = mapping.synth_map(large, 0.01, seed=7, tau=tau)
    for index in range(len(a)):
        assert a[index][2] == b[index][2]


def test_gradient_field_varies_along_x():
    truth = mapping.gradient_field("rabi", nx=5, ny=2)
    a3 = truth.field_of("a3")
    assert np.all(np.diff(a3[:, 0]) > 0)
    np.testing.assert_array_equal(a3[:, 0], a3[:, 1])
    assert a3[2, 0] == 5e6
    np.testing.assert_allclose(truth.pi_time, 1 / (2 * a3))


def test_per_pixel_pi_pulses_remove_the_residual_excess():
    per_pixel = mapping.gradient_field("t2", nx=2, ny=5, pi_time=100e-9)
    global_pulse = per_pixel.with_applied_pi_time(100e-9)

    def residuals(truth):
        records = mapping.synth_map(truth, 0.0, seed=0)
        return np.array([pulse_fit.fit(T2, series).residual_rms for _, _, series in records])

    assert np.all(residuals(per_pixel) < 1e-8)
    assert residuals(global_pulse).max() > 1e-4


def test_pulse_efficiency():
    assert mapping.pulse_efficiency(100e-9, 100e-9) == pytest.approx(1.0)
    assert mapping.pulse_efficiency(50e-9, 100e-9) == pytest.approx(0.5)
    assert mapping.pulse_efficiency(0.0, 100e-9) == 0.0
    with pytest.raises(DomainError):
        mapping.pulse_efficiency(50e-9, 0.0)


def test_pulse_plan_halves_pi_time():
    pi_map = PixelMap((0, 0), 50 * UM, [[100e-9, math.nan], [120e-9, 90e-9]], Quantity.PI_TIME, "s")
    plan = mapping.pulse_plan(pi_map)
    assert list(plan.columns) == ["x_um", "y_um", "pi_time_s", "pi_half_time_s"]
    np.testing.assert_allclose(plan["x_um"], [0.0, 0.0, 50.0, 50.0])
    np.testing.assert_allclose(plan["y_um"], [0.0, 50.0, 0.0, 50.0])
    assert plan["pi_half_time_s"].iloc[0] == 50e-9
    assert math.isnan(plan["pi_half_time_s"].iloc[1])


def test_pulse_plan_needs_pi_time_map():
    with pytest.raises(DomainError):
        mapping.pulse_plan(PixelMap((0, 0), UM, [[1.0]], Quantity.T1, "s"))


def test_pixel_map_json_keeps_missing_pixels():
    pixel_map = PixelMap((5 * UM, 0.0), 50 * UM, [[1e-3, math.nan]], Quantity.T1, "s")
    text = pixel_map.to_json()
    assert json.loads(text)["values"] == [[1e-3, None]]
    assert PixelMap.from_json(text) == pixel_map
    with pytest.raises(ConfigError):
        PixelMap.from_json('{"values": [[1.0]]}')


def test_truth_field_csv(tmp_path):
    truth = mapping.gradient_field("t2", nx=3, ny=4, scatter=0.02, pi_time=100e-9, applied_pi_time=100e-9)
    path = mapping.write_truth_field(tmp_path / "truth.csv", truth)
    restored = mapping.read_truth_field(path, "t2", pitch=50 * UM)
    np.testing.assert_array_equal(restored.params, truth.params)
    np.testing.assert_array_equal(restored.pi_time, truth.pi_time)
    np.testing.assert_array_equal(restored.applied_pi_time, truth.applied_pi_time)
    assert mapping.read_truth_field(path, "t2").pitch == pytest.approx(50 * UM)


def test_truth_field_csv_with_wrong_model(tmp_path):
    path = mapping.write_truth_field(tmp_path / "truth.csv", mapping.gradient_field("rabi", nx=2, ny=2))
    with pytest.raises(ConfigError, match="header"):
        mapping.read_truth_field(path, "t1")


def rabi_pulse_plan(nx, ny):
    rabi = mapping.gradient_field("rabi", nx=nx, ny=ny)
    pi_map = mapping.assemble(mapping.synth_map(rabi, 0.0, seed=0), "rabi", 50 * UM)
    return rabi, pi_map


def test_pulse_plan_csv_reads_back_as_pi_map(tmp_path):
    pi_map = PixelMap((0, 0), 50 * UM, [[100e-9, math.nan], [120e-9, 90e-9]], Quantity.PI_TIME, "s")
    path = tmp_path / "pulse_plan.csv"
    atomic_write_frame(mapping.pulse_plan(pi_map), path)
    restored = mapping.read_pulse_plan(path)
    assert restored.quantity is Quantity.PI_TIME
    assert restored.pitch == pytest.approx(50 * UM)
    np.testing.assert_array_equal(restored.values, pi_map.values)


def test_pulse_plan_csv_with_wrong_header(tmp_path):
    path = tmp_path / "plan.csv"
    path.write_text("x_um,y_um,pi\n0,0,1e-7\n")
    with pytest.raises(ConfigError, match="header"):
        mapping.read_pulse_plan(path)


def test_measured_pulse_plan_removes_the_residual_excess():
    rabi, pi_map = rabi_pulse_plan(3, 4)
    t2 = replace(mapping.gradient_field("t2", nx=3, ny=4), pi_time=rabi.pi_time)
    planned = t2.with_pulse_plan(pi_map)
    np.testing.assert_allclose(planned.applied_pi_time, rabi.pi_time, rtol=1e-6)
    np.testing.assert_array_equal(planned.pi_time, rabi.pi_time)

    def residuals(truth):
        return np.array([pulse_fit.fit(T2, s).residual_rms for _, _, s in mapping.synth_map(truth, 0.0, seed=0)])

    assert np.all(residuals(planned) < 1e-6)
    assert residuals(t2.with_applied_pi_time(100e-9)).max() > 10 * residuals(planned).max()


def test_pulse_plan_without_true_pi_times_is_taken_as_truth():
    _, pi_map = rabi_pulse_plan(2, 2)
    planned = mapping.gradient_field("t1", nx=2, ny=2).with_pulse_plan(pi_map)
    np.testing.assert_array_equal(planned.pi_time, planned.applied_pi_time)
    np.testing.assert_array_equal(planned.applied_pi_time, pi_map.values)


def test_pulse_plan_gaps_use_the_plan_mean(caplog):
    pi_map = PixelMap((0, 0), 50 * UM, [[100e-9, math.nan], [120e-9, 110e-9]], Quantity.PI_TIME, "s")
    with caplog.at_level(logging.WARNING, logger="mapping"):
        planned = mapping.gradient_field("t2", nx=2, ny=2).with_pulse_plan(pi_map)
    assert planned.applied_pi_time[0, 1] == pytest.approx(110e-9)
    assert "plan mean" in caplog.text


def test_pulse_plan_must_cover_the_field():
    _, pi_map = rabi_pulse_plan(2, 2)
    with pytest.raises(MappingError, match="no pixel"):
        mapping.gradient_field("t2", nx=3, ny=2).with_pulse_plan(pi_map)
    with pytest.raises(DomainError):
        mapping.gradient_field("rabi", nx=2, ny=2).with_pulse_plan(pi_map)
    with pytest.raises(DomainError):
        mapping.gradient_field("t2", nx=2, ny=2).with_pulse_plan(replace(pi_map, quantity=Quantity.T1))

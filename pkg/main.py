import json
import logging
import math
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import click
import numpy as np
import pandas as pd
from tabulate import tabulate

import beam_optics
import designer
import mapping
import nv_rate_model
import pulse_fit
from beam_optics import VolumeModel
from designer import SweepSpec, SweepVariable
from util import (
    ConfigError,
    DomainError,
    LrcfmError,
    MappingError,
    NoValidPixelsError,
    NumericalError,
    atomic_write_frame,
    atomic_write_text,
    line_of_key,
    load_key_values,
    log_uncaught_exceptions,
    parse_quantity,
    require_quantity,
    setup_logging,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_USAGE = 4

ROBUSTNESS_POWERS = (1e-3, 3e-3, 10e-3, 30e-3, 100e-3)
DEFAULT_LENS_RADIUS = 12.7e-3
# CFM focal lengths around cfm.focal_length for the proportion x waist ratio grid
CFM_FOCAL_OCTAVES = (-2, -1, 0, 1, 2)

CONFIG_KEYS = {
    "laser.wavelength", "laser.power", "laser.beam_diameter",
    "sample.thickness", "sample.density", "sample.refractive_index",
    "rates", "pump.kappa", "lens.radius", "lens.catalog",
    "fiber.core_diameter", "fiber.magnification", "volume_model",
    "sweep.points", "sweep.min", "sweep.max", "cfm.focal_length", "output",
}


def resource_path(*parts):
    """
    Path of a bundled data file, inside the PyInstaller bundle when frozen.
    """
    if getattr(sys, "frozen", False):
        base_path = sys._MEIPASS
    else:
        base_path = os.path.dirname(os.path.abspath(__file__))
    return Path(base_path, *parts)


def get_version():
    """
    Get the version from the environment when bundled, or fall back to the VERSION file.
    """
    if getattr(sys, "frozen", False):
        version = os.getenv("VERSION")
        if version:
            return version
    try:
        return resource_path("VERSION").read_text(encoding="utf-8").strip()
    except FileNotFoundError:
        return "Unknown Version"


__version__ = get_version()


@dataclass(frozen=True)
class RunConfig:
    path: Path
    wavelength: float
    power: float
    beam_diameter: float
    thickness: float
    density: float
    refractive_index: float
    rates_path: Path
    rates: nv_rate_model.NvRateSet
    pump: nv_rate_model.PumpModel
    lens_radius: float
    catalog_path: Path
    catalog: designer.LensCatalog
    fiber_core_radius: float
    fiber_magnification: float
    volume_model: VolumeModel
    sweep_points: int
    sweep_min: float
    sweep_max: float
    cfm_focal: float
    output: Path

    def sweep_spec(self, variable=SweepVariable.RAYLEIGH_LENGTH, grid=None, **overrides):
        variable = SweepVariable(variable)
        if grid is None:
            grid = designer.log_grid(self.sweep_min, self.sweep_max, self.sweep_points)
        fields = dict(
            variable=variable,
            grid=grid,
            laser_power=self.power,
            wavelength=self.wavelength,
            beam_diameter=self.beam_diameter,
            sample_thickness=self.thickness,
            lens_radius=self.lens_radius,
            rates=self.rates,
            pump=self.pump,
            volume_model=self.volume_model,
            fiber_core_radius=self.fiber_core_radius,
            fiber_magnification=self.fiber_magnification,
            density=self.density,
            refractive_index=self.refractive_index,
        )
        fields.update(overrides)
        return SweepSpec(**fields)


def load_run_config(path):
    """
    Read a run configuration (dotted key = value with unit suffixes).

    Relative file references resolve against the config file's directory.

    Returns:
        RunConfig
    """
    path = Path(path)
    values = load_key_values(path)
    for key in values:
        if key not in CONFIG_KEYS:
            logger.warning(f"Ignoring unknown key '{key}' in {path}")

    def number(key, default):
        raw = values.get(key)
        if raw is None or raw == "":
            return default
        try:
            return float(parse_quantity(raw))
        except ValueError as e:
            raise ConfigError(str(e), path=path, key=key, line=line_of_key(path, key)) from e

    def referenced(key):
        raw = values.get(key)
        if not raw:
            return None
        target = Path(raw)
        if not target.is_absolute():
            target = path.parent / target
        if not target.is_file():
            raise ConfigError(f"referenced file not found: {target}", path=path, key=key, line=line_of_key(path, key))
        return target

    rates_path = referenced("rates")
    if rates_path is None:
        raise ConfigError("missing required value", path=path, key="rates")
    rates, pump = nv_rate_model.load_rate_set(rates_path)
    kappa = number("pump.kappa", None)
    if kappa is not None:
        pump = nv_rate_model.with_pump_coupling(pump, kappa)

    catalog_path = referenced("lens.catalog")
    catalog = designer.load_lens_catalog(catalog_path) if catalog_path else None

    lens_radius = require_quantity(values, "lens.radius", "length", path, default=math.nan)
    core = require_quantity(values, "fiber.core_diameter", "length", path, default=math.nan)
    raw_model = values.get("volume_model") or VolumeModel.CLIPPED.value
    try:
        volume_model = VolumeModel(raw_model)
    except ValueError as e:
        raise ConfigError(f"unknown volume model '{raw_model}'", path=path, key="volume_model",
                          line=line_of_key(path, "volume_model")) from e

    points = number("sweep.points", designer.DEFAULT_GRID_POINTS)
    if points != int(points) or points < 1:
        raise ConfigError("must be a positive integer", path=path, key="sweep.points",
                          line=line_of_key(path, "sweep.points"))

    config = RunConfig(
        path=path,
        wavelength=require_quantity(values, "laser.wavelength", "length", path),
        power=require_quantity(values, "laser.power", "power", path),
        beam_diameter=require_quantity(values, "laser.beam_diameter", "length", path),
        thickness=require_quantity(values, "sample.thickness", "length", path),
        density=number("sample.density", 1.0),
        refractive_index=number("sample.refractive_index", 1.0),
        rates_path=rates_path,
        rates=rates,
        pump=pump,
        lens_radius=DEFAULT_LENS_RADIUS if math.isnan(lens_radius) else lens_radius,
        catalog_path=catalog_path,
        catalog=catalog,
        fiber_core_radius=None if math.isnan(core) else core / 2.0,
        fiber_magnification=number("fiber.magnification", 1.0),
        volume_model=volume_model,
        sweep_points=int(points),
        sweep_min=require_quantity(values, "sweep.min", "length", path, default=designer.DEFAULT_GRID_MIN),
        sweep_max=require_quantity(values, "sweep.max", "length", path, default=designer.DEFAULT_GRID_MAX),
        cfm_focal=require_quantity(values, "cfm.focal_length", "length", path, default=3.6e-3),
        output=Path(values.get("output") or "out"),
    )
    if math.isnan(lens_radius) and catalog is not None:
        lens = designer.recommend_lens(catalog, config.sweep_spec())
        config = replace(config, lens_radius=lens.diameter / 2.0)
        logger.info(f"lens.radius not set; using half the diameter of {lens.name} ({lens.diameter / 2.0:.6g} m)")
    logger.info(f"Run configuration loaded from {path}")
    return config


@dataclass
class CliState:
    config_path: Path
    out: Path
    threads: int
    seed: int
    verbose: int

    def config(self):
        return load_run_config(self.config_path)

    def output_dir(self, config=None):
        if self.out is not None:
            return self.out
        return config.output if config is not None else Path("out")


def _quantity_option(text, dimension, name):
    try:
        return parse_quantity(text, dimension)
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint=name) from e


def _summary(rows):
    click.echo(tabulate(rows, headers=["quantity", "value"], tablefmt="github"))


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path),
              default=None, help="Run configuration (defaults to the bundled reference config).")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Output directory (overrides the config's 'output').")
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG.")
@click.option("--log-file", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.version_option(version=__version__, prog_name="lrcfm", message="%(version)s")
@click.pass_context
def cli(ctx, config_path, out, threads, seed, verbose, log_file):
    """Design and analysis toolkit for long-Rayleigh-length confocal microscopy."""
    setup_logging(verbose, log_file)
    ctx.obj = CliState(config_path or resource_path("resources", "reference.env"), out, threads, seed, verbose)


@cli.command()
@click.pass_obj
def design(state):
    """Optimal Rayleigh length, objective focal length and catalog lens."""
    config = state.config()
    out = state.output_dir(config)
    spec = config.sweep_spec()
    progress = state.verbose > 0

    optimum = designer.optimal_rayleigh(spec, workers=state.threads, progress=progress)
    beam = optimum.point.beam
    atomic_write_frame(optimum.table, out / "sweep.csv")

    robustness = designer.power_robustness(spec, ROBUSTNESS_POWERS, workers=state.threads)
    atomic_write_frame(robustness, out / "power_robustness.csv")

    report = {
        "rayleigh_length_m": optimum.rayleigh_length,
        "twice_rayleigh_length_m": 2.0 * optimum.rayleigh_length,
        "twice_rayleigh_over_thickness": 2.0 * optimum.rayleigh_length / config.thickness,
        "focal_length_m": beam.focal_length,
        "waist_radius_m": beam.waist_radius,
        "spot_diameter_m": beam.spot_diameter,
        "detected_signal": optimum.detected_signal,
        "unimodal": optimum.unimodal,
        "refined": optimum.refined,
        "volume_model": config.volume_model.value,
        "recommended_lens": None,
    }
    rows = [
        ["2 z_R* [um]", f"{2e6 * optimum.rayleigh_length:.2f}"],
        ["focal length F* [mm]", f"{1e3 * beam.focal_length:.3f}"],
        ["spot diameter [um]", f"{1e6 * beam.spot_diameter:.2f}"],
    ]

    if config.catalog is not None:
        lens = designer.recommend_lens(config.catalog, spec, workers=state.threads)
        lens_beam = beam_optics.BeamGeometry.from_lens(lens.focal_length, config.beam_diameter, config.wavelength)
        atomic_write_frame(lens.table, out / "lens_candidates.csv")
        report["recommended_lens"] = {
            "name": lens.name,
            "focal_length_m": lens.focal_length,
            "diameter_m": lens.diameter,
            "waist_radius_m": lens.waist_radius,
            "rayleigh_length_m": lens.rayleigh_length,
            "spot_diameter_m": lens_beam.spot_diameter,
            "detected_signal": lens.detected_signal,
            "duplicate_warning": lens.duplicate_warning,
        }
        rows += [
            ["recommended lens", lens.name],
            ["lens spot diameter [um]", f"{1e6 * lens_beam.spot_diameter:.2f}"],
        ]

    atomic_write_text(out / "design.json", json.dumps(report, indent=2) + "\n")
    _summary(rows)


@cli.command()
@click.option("--variable", type=click.Choice(["rayleigh", "waist", "detection-proportion"]),
              default="rayleigh", show_default=True)
@click.option("--points", type=click.IntRange(min=1), default=None)
@click.option("--min", "lo", default=None, help="Grid start, e.g. '1 um' (plain number for proportions).")
@click.option("--max", "hi", default=None, help="Grid end, e.g. '10 mm' (plain number for proportions).")
@click.option("--cfm-focal", multiple=True,
              help="CFM objective focal length, e.g. '3.6 mm'; repeat for more CFM beam waists.")
@click.option("--power", default=None, help="Laser power override, e.g. '10 mW'.")
@click.option("--volume-model", type=click.Choice([m.value for m in VolumeModel]), default=None)
@click.pass_obj
def sweep(state, variable, points, lo, hi, cfm_focal, power, volume_model):
    """Sweep the design space and write a plot-ready CSV.

    Plot detected_signal (or volume_m3, icw, polarization, product) against
    variable for the Rayleigh-length curves; plot ratio against proportion
    and cfm_waist_radius_m from cfm_ratio.csv for the confocal comparison.
    """
    config = state.config()
    out = state.output_dir(config)
    points = points or config.sweep_points
    overrides = {}
    if power is not None:
        overrides["laser_power"] = _quantity_option(power, "power", "--power")
    if volume_model is not None:
        overrides["volume_model"] = VolumeModel(volume_model)

    if variable == "detection-proportion":
        lo = float(_quantity_option(lo, None, "--min")) if lo else 1e-6
        hi = float(_quantity_option(hi, None, "--max")) if hi else 1.0
        if cfm_focal:
            focals = sorted({_quantity_option(text, "length", "--cfm-focal") for text in cfm_focal})
        else:
            focals = [config.cfm_focal * 2.0 ** k for k in CFM_FOCAL_OCTAVES]
        spec = config.sweep_spec(**overrides)
        proportions = designer.log_grid(lo, hi, points) if points > 1 else (hi,)
        table = designer.cfm_comparison(spec, focals, proportions, workers=state.threads)
        thresholds = pd.DataFrame({
            "cfm_focal_length_m": focals,
            "p_star": [designer.cfm_threshold(spec, focal, workers=state.threads) for focal in focals],
        })
        atomic_write_frame(table, out / "cfm_ratio.csv")
        atomic_write_frame(thresholds, out / "cfm_threshold.csv")
        _summary([[f"p* at CFM focal {1e3 * row.cfm_focal_length_m:.3f} mm (ratio >= 1e4)",
                   "none" if pd.isna(row.p_star) else f"{row.p_star:.6g}"]
                  for row in thresholds.itertuples(index=False)])
        return

    lo = _quantity_option(lo, "length", "--min") if lo else config.sweep_min
    hi = _quantity_option(hi, "length", "--max") if hi else config.sweep_max
    grid = designer.log_grid(lo, hi, points) if points > 1 else (lo,)
    kind = SweepVariable.RAYLEIGH_LENGTH if variable == "rayleigh" else SweepVariable.WAIST_RADIUS
    spec = config.sweep_spec(kind, grid, **overrides)
    table = designer.sweep(spec, workers=state.threads, progress=state.verbose > 0)
    atomic_write_frame(table, out / "sweep.csv")
    best = int(np.argmax(table["detected_signal"].to_numpy()))
    _summary([["rows", len(table)], [f"grid argmax ({kind.value}) [m]", f"{table['variable'][best]:.6g}"]])


def _parse_init(text, model):
    if text is None:
        return None
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError as e:
        raise click.BadParameter(f"'{text}' is not a comma-separated list of numbers", param_hint="--init") from e
    if len(values) != model.arity:
        raise click.BadParameter(f"{model.kind.value} takes {model.arity} values", param_hint="--init")
    return values


@cli.command()
@click.option("--model", "kind", type=click.Choice([k.value for k in pulse_fit.ModelKind]), required=True)
@click.option("--init", default=None, help="Comma-separated starting parameters a1,a2,...")
@click.argument("series", type=click.Path(path_type=Path))
@click.pass_obj
def fit(state, kind, init, series):
    """Fit a rabi, t1 or t2 model to a tau_s,signal[,sigma] CSV."""
    model = pulse_fit.FitModel.of(kind)
    init = _parse_init(init, model)
    data = pulse_fit.read_time_series(series)
    result = pulse_fit.fit(model, data, init)
    out = state.output_dir()
    pulse_fit.write_fit_result(out / f"{series.stem}_{kind}.json", result)

    rows = [[name, f"{value:.9g}"] for name, value in zip(model.param_names, result.params)]
    rows += [["residual_rms", f"{result.residual_rms:.6g}"], ["converged", result.converged]]
    if model.kind is pulse_fit.ModelKind.RABI and result.converged and result.params[2] > 0:
        rows.append(["pi time [s]", f"{pulse_fit.pi_time(result):.9g}"])
    _summary(rows)


def _read_manifest(source):
    source = Path(source)
    manifest = source / "manifest.csv" if source.is_dir() else source
    if not manifest.is_file():
        raise ConfigError("manifest not found", path=manifest)
    try:
        frame = pd.read_csv(manifest, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read manifest: {e}", path=manifest) from e
    if list(frame.columns) != ["file", "x_um", "y_um"]:
        raise ConfigError("manifest header must be file,x_um,y_um", path=manifest)
    records = []
    for row in frame.itertuples(index=False):
        series = pulse_fit.read_time_series(manifest.parent / row.file)
        records.append((row.x_um * mapping.UM, row.y_um * mapping.UM, series))
    return records


@cli.command(name="map")
@click.option("--model", "kind", type=click.Choice([k.value for k in pulse_fit.ModelKind]), required=True)
@click.option("--pitch", default="50 um", show_default=True)
@click.argument("source", type=click.Path(path_type=Path))
@click.pass_obj
def map_command(state, kind, pitch, source):
    """Fit every pixel of a manifest and write the map and its statistics."""
    pitch = _quantity_option(pitch, "length", "--pitch")
    records = _read_manifest(source)
    pixel_map = mapping.assemble(records, kind, pitch, workers=state.threads, progress=state.verbose > 0)
    out = state.output_dir()
    atomic_write_frame(pixel_map.to_frame(), out / "map.csv")
    atomic_write_text(out / "map.json", pixel_map.to_json() + "\n")
    if pixel_map.quantity is mapping.Quantity.PI_TIME:
        atomic_write_frame(mapping.pulse_plan(pixel_map), out / "pulse_plan.csv")
    summary = mapping.stats(pixel_map)
    atomic_write_text(out / "stats.json", json.dumps(summary.to_dict(), indent=2) + "\n")
    _summary([[name, value] for name, value in summary.to_dict().items()])


@cli.command()
@click.option("--model", "kind", type=click.Choice([k.value for k in pulse_fit.ModelKind]), required=True)
@click.option("--truth", type=click.Path(path_type=Path), default=None,
              help="Truth-field CSV; a 7x21 gradient field at 50 um pitch when omitted.")
@click.option("--noise", type=float, default=0.0, show_default=True, help="Gaussian noise sigma (signal units).")
@click.option("--tau-max", default=None, help="Longest delay, e.g. '50 us'.")
@click.option("--points", type=click.IntRange(min=2), default=None)
@click.option("--pi-time", default=None, help="Center pi time for t1/t2 fields, e.g. '100 ns'.")
@click.option("--applied-pi-time", default=None, help="Global applied pi time instead of per-pixel.")
@click.option("--pulse-plan", type=click.Path(path_type=Path), default=None,
              help="pulse_plan.csv from a rabi map; its per-pixel pi times are the applied pulses.")
@click.pass_obj
def simulate(state, kind, truth, noise, tau_max, points, pi_time, applied_pi_time, pulse_plan):
    """Write a synthetic per-pixel dataset and its manifest."""
    if pulse_plan is not None and applied_pi_time is not None:
        raise click.BadParameter("cannot be combined with --applied-pi-time", param_hint="--pulse-plan")
    if pulse_plan is not None and kind == pulse_fit.ModelKind.RABI.value:
        raise click.BadParameter("applies to t1 and t2 only", param_hint="--pulse-plan")
    if truth is not None:
        field = mapping.read_truth_field(truth, kind)
    else:
        field = mapping.gradient_field(
            kind,
            seed=state.seed,
            pi_time=_quantity_option(pi_time, "time", "--pi-time") if pi_time else None,
        )
    if applied_pi_time is not None:
        if field.pi_time is None:
            raise click.BadParameter("needs true pi times (--pi-time or a truth file)", param_hint="--applied-pi-time")
        field = field.with_applied_pi_time(_quantity_option(applied_pi_time, "time", "--applied-pi-time"))
    if pulse_plan is not None:
        field = field.with_pulse_plan(mapping.read_pulse_plan(pulse_plan, pitch=field.pitch))
    tau = mapping.default_tau(
        field,
        points=points,
        tau_max=_quantity_option(tau_max, "time", "--tau-max") if tau_max else None,
    )
    records = mapping.synth_map(field, noise, state.seed, tau)

    out = state.output_dir()
    rows = []
    for index, (x, y, series) in enumerate(records):
        name = f"pixel_{index:04d}.csv"
        pulse_fit.write_time_series(out / name, series)
        rows.append([name, x / mapping.UM, y / mapping.UM])
    atomic_write_frame(pd.DataFrame(rows, columns=["file", "x_um", "y_um"]), out / "manifest.csv")
    mapping.write_truth_field(out / "truth.csv", field)
    _summary([["pixels", len(records)], ["points per pixel", tau.size], ["seed", state.seed]])


def main(argv=None):
    """
    Run the command line and return its exit code.

    0 success, 2 input or config error, 3 numerical failure, 4 usage error.
    """
    sys.excepthook = log_uncaught_exceptions
    try:
        rc = cli.main(args=argv, prog_name="lrcfm", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        click.echo("Aborted!", err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_INPUT
    except (NumericalError, NoValidPixelsError) as e:
        logger.error(f"Numerical failure: {e}")
        click.echo(f"error: {e}", err=True)
        return EXIT_NUMERICAL
    except (ConfigError, DomainError, MappingError, OSError) as e:
        logger.error(f"Input error: {e}")
        click.echo(f"error: {e}", err=True)
        return EXIT_INPUT
    except LrcfmError as e:
        logger.error(f"{type(e).__name__}: {e}")
        click.echo(f"error: {e}", err=True)
        return EXIT_INPUT
    return rc if isinstance(rc, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

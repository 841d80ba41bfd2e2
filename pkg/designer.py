"""
Design-space sweeps for the long-Rayleigh-length confocal microscope.

Sweeps the excitation geometry, locates the Rayleigh length that maximizes the
detected signal, picks a catalog lens and compares against a conventional
confocal objective.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import brentq, minimize_scalar
from tqdm import tqdm

import beam_optics
import collection
from beam_optics import BeamGeometry, VolumeModel
from nv_rate_model import NvRateSet, PumpModel
from util import ConfigError, DomainError, LrcfmError, SweepError

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["variable", "volume_m3", "icw", "polarization", "product", "detection_rate", "detected_signal"]
DEFAULT_GRID_POINTS = 200
DEFAULT_GRID_MIN = 1e-6
DEFAULT_GRID_MAX = 10e-3


class SweepVariable(str, Enum):
    RAYLEIGH_LENGTH = "rayleigh_length"
    WAIST_RADIUS = "waist_radius"
    DETECTION_PROPORTION = "detection_proportion"


def log_grid(lo, hi, points=DEFAULT_GRID_POINTS):
    """`points` log-spaced values from lo to hi inclusive."""
    if not (0 < lo < hi):
        raise DomainError(f"grid bounds must satisfy 0 < lo < hi, got {lo!r}, {hi!r}")
    if points < 1:
        raise DomainError("grid needs at least one point")
    return tuple(float(v) for v in np.geomspace(lo, hi, points))


@dataclass(frozen=True)
class SweepSpec:
    """One design sweep: the varied quantity, its grid and the fixed context."""

    variable: SweepVariable
    grid: tuple
    laser_power: float
    wavelength: float
    beam_diameter: float
    sample_thickness: float
    lens_radius: float
    rates: NvRateSet
    pump: PumpModel
    volume_model: VolumeModel = VolumeModel.CLIPPED
    proportion: float = 1.0
    fiber_core_radius: float = None
    fiber_magnification: float = 1.0
    density: float = 1.0
    refractive_index: float = 1.0
    focal_length: float = None
    fixed_detection_rate: float = None

    def __post_init__(self):
        object.__setattr__(self, "variable", SweepVariable(self.variable))
        object.__setattr__(self, "volume_model", VolumeModel(self.volume_model))
        grid = tuple(float(v) for v in self.grid)
        object.__setattr__(self, "grid", grid)
        if not grid:
            raise DomainError("sweep grid is empty")
        if any(not v > 0 for v in grid):
            raise DomainError("sweep grid values must be > 0")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise DomainError("sweep grid must be strictly increasing")
        if self.variable is SweepVariable.DETECTION_PROPORTION:
            if grid[-1] > 1:
                raise DomainError("detection proportions must lie in (0, 1]")
            if self.focal_length is None:
                raise DomainError("a detection-proportion sweep needs a fixed focal length")
        for name in ("laser_power", "wavelength", "beam_diameter", "sample_thickness", "lens_radius"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be > 0, got {getattr(self, name)!r}")
        if len(grid) < 16:
            logger.debug(f"Sweep grid has only {len(grid)} points")

    @staticmethod
    def default_grid():
        return log_grid(DEFAULT_GRID_MIN, DEFAULT_GRID_MAX, DEFAULT_GRID_POINTS)

    def with_grid(self, grid, variable=None):
        return replace(self, grid=tuple(grid), variable=variable or self.variable)


@dataclass(frozen=True)
class DesignPoint:
    beam: BeamGeometry
    figure: collection.FigureOfMerit
    collection: collection.CollectionGeometry


def _focal_length_for(spec, value):
    if spec.variable is SweepVariable.RAYLEIGH_LENGTH:
        return beam_optics.focal_length_for_rayleigh(value, spec.beam_diameter, spec.wavelength)
    if spec.variable is SweepVariable.WAIST_RADIUS:
        return beam_optics.focal_length_for_waist(value, spec.beam_diameter, spec.wavelength)
    return spec.focal_length


def evaluate_lens(spec, focal_length, lens_radius=None, proportion=None):
    """
    Evaluate the figure of merit for an objective of focal length F.

    Args:
        spec (SweepSpec): Fixed context.
        focal_length (float): Objective focal length [m].
        lens_radius (float | None): Overrides spec.lens_radius.
        proportion (float | None): Overrides the spec's fiber/proportion setting.

    Returns:
        DesignPoint
    """
    beam = BeamGeometry.from_lens(focal_length, spec.beam_diameter, spec.wavelength)
    region = beam_optics.excitation_region(
        beam.waist_radius,
        spec.sample_thickness,
        spec.laser_power,
        spec.wavelength,
        model=spec.volume_model,
        refractive_index=spec.refractive_index,
    )
    coll = collection.collection_from_lens(lens_radius or spec.lens_radius, focal_length)
    if proportion is None:
        if spec.fiber_core_radius is not None:
            proportion = collection.detection_proportion(
                spec.fiber_core_radius, spec.fiber_magnification, beam.waist_radius
            )
        else:
            proportion = spec.proportion
    rate = coll if spec.fixed_detection_rate is None else spec.fixed_detection_rate
    figure = collection.figure_of_merit(beam, region, spec.rates, spec.pump, rate, proportion, spec.density)
    return DesignPoint(beam=beam, figure=figure, collection=coll)


def evaluate_point(spec, value):
    """Evaluate one grid value of the spec's sweep variable."""
    focal_length = _focal_length_for(spec, value)
    if spec.variable is SweepVariable.DETECTION_PROPORTION:
        return evaluate_lens(spec, focal_length, proportion=value)
    return evaluate_lens(spec, focal_length)


def _row(spec, index, value):
    try:
        point = evaluate_point(spec, value)
    except LrcfmError as e:
        raise SweepError(str(e), index, value, getattr(e, "diagnostics", None)) from e
    fom = point.figure
    return [value, fom.detection_volume, fom.i_cw, fom.polarization, fom.product, fom.detection_rate, fom.detected_signal]


def sweep(spec, workers=1, progress=False):
    """
    Evaluate every grid point of `spec`.

    Returns:
        pandas.DataFrame: Columns variable, volume_m3, icw, polarization,
        product, detection_rate, detected_signal; one row per grid point in
        grid order.
    """
    indexed = list(enumerate(spec.grid))
    bar = tqdm(total=len(indexed), desc=f"sweep {spec.variable.value}", disable=not progress, leave=False)

    def run(item):
        row = _row(spec, *item)
        bar.update(1)
        return row

    try:
        if workers and workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                rows = list(pool.map(run, indexed))
        else:
            rows = [run(item) for item in indexed]
    finally:
        bar.close()
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


@dataclass(frozen=True)
class Optimum:
    rayleigh_length: float
    detected_signal: float
    grid_index: int
    unimodal: bool
    refined: bool
    point: DesignPoint = field(repr=False, default=None)
    table: pd.DataFrame = field(repr=False, compare=False, default=None)

    @property
    def focal_length(self):
        return self.point.beam.focal_length


def _is_unimodal(values):
    steps = np.sign(np.diff(values))
    steps = steps[steps != 0]
    if steps.size == 0:
        return True
    changes = int(np.count_nonzero(steps[1:] != steps[:-1]))
    return bool(changes == 0 or (changes == 1 and steps[0] > 0))


def _rayleigh_spec(spec):
    if spec.variable is SweepVariable.RAYLEIGH_LENGTH:
        return spec
    if spec.variable is SweepVariable.WAIST_RADIUS:
        grid = [beam_optics.rayleigh_length(w, spec.wavelength) for w in spec.grid]
        return spec.with_grid(grid, SweepVariable.RAYLEIGH_LENGTH)
    raise DomainError("the optimum search needs a Rayleigh-length or waist-radius sweep")


def optimal_rayleigh(spec, workers=1, progress=False):
    """
    Rayleigh length that maximizes the detected signal.

    The grid argmax (first one on ties, i.e. the smaller z_R) is refined by a
    golden-section search between its neighbours to relative tolerance 1e-4.
    A profile with more than one turn on the grid is not refined and comes
    back with `unimodal=False`.

    Returns:
        Optimum
    """
    spec = _rayleigh_spec(spec)
    table = sweep(spec, workers=workers, progress=progress)
    values = table["detected_signal"].to_numpy()
    grid = np.asarray(spec.grid)
    best = int(np.argmax(values))
    unimodal = _is_unimodal(values)

    zr_best, signal_best, refined = float(grid[best]), float(values[best]), False
    if not unimodal:
        logger.warning(
            f"Detected-signal profile is not unimodal on the grid; returning grid argmax z_R={zr_best:.6g} m"
        )
    elif 0 < best < len(grid) - 1 and values[best] > values[best - 1] and values[best] > values[best + 1]:

        def objective(zr):
            return -evaluate_point(spec, zr).figure.detected_signal

        try:
            result = minimize_scalar(
                objective,
                bracket=(grid[best - 1], grid[best], grid[best + 1]),
                method="golden",
                options={"xtol": 1e-4},
            )
            if grid[best - 1] <= result.x <= grid[best + 1] and -result.fun >= signal_best:
                zr_best, signal_best, refined = float(result.x), float(-result.fun), True
        except (ValueError, LrcfmError) as e:
            logger.warning(f"Golden-section refinement failed, keeping grid argmax: {e}")

    point = evaluate_point(spec, zr_best)
    logger.info(f"Optimal Rayleigh length {zr_best:.6g} m (2 z_R / t = {2 * zr_best / spec.sample_thickness:.4f})")
    return Optimum(zr_best, signal_best, best, bool(unimodal), bool(refined), point, table)


def power_robustness(spec, powers, workers=1):
    """
    Optimal Rayleigh length at each laser power.

    Returns:
        pandas.DataFrame: Columns power_w, rayleigh_length_m, twice_zr_over_thickness, detected_signal.
    """
    rows = []
    for power in powers:
        optimum = optimal_rayleigh(replace(spec, laser_power=float(power)), workers=workers)
        rows.append([
            float(power),
            optimum.rayleigh_length,
            2.0 * optimum.rayleigh_length / spec.sample_thickness,
            optimum.detected_signal,
        ])
    return pd.DataFrame(rows, columns=["power_w", "rayleigh_length_m", "twice_zr_over_thickness", "detected_signal"])


@dataclass(frozen=True)
class LensEntry:
    name: str
    focal_length: float
    diameter: float


@dataclass(frozen=True)
class LensCatalog:
    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        names = [entry.name for entry in entries]
        if len(set(names)) != len(names):
            raise DomainError("lens names in a catalog must be unique")
        for entry in entries:
            if not (entry.focal_length > 0 and entry.diameter > 0):
                raise DomainError(f"lens '{entry.name}' needs positive focal length and diameter")

    def __len__(self):
        return len(self.entries)


def load_lens_catalog(path):
    """Read a lens catalog CSV with header name,focal_length_mm,diameter_mm."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("lens catalog not found", path=path)
    try:
        frame = pd.read_csv(path, dtype={"name": str}, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read lens catalog: {e}", path=path) from e
    expected = ["name", "focal_length_mm", "diameter_mm"]
    if list(frame.columns) != expected:
        raise ConfigError(f"lens catalog header must be {','.join(expected)}, got {','.join(map(str, frame.columns))}", path=path)
    try:
        entries = [
            LensEntry(str(row.name), float(row.focal_length_mm) * 1e-3, float(row.diameter_mm) * 1e-3)
            for row in frame.itertuples(index=False)
        ]
        return LensCatalog(tuple(entries))
    except (ValueError, DomainError) as e:
        raise ConfigError(str(e), path=path) from e


@dataclass(frozen=True)
class LensRecommendation:
    name: str
    focal_length: float
    diameter: float
    detected_signal: float
    waist_radius: float
    rayleigh_length: float
    duplicate_warning: bool
    table: pd.DataFrame = field(repr=False, compare=False, default=None)


def recommend_lens(catalog, spec, workers=1):
    """
    Catalog lens with the largest detected signal.

    Each lens sets the waist through w0 = 2λF/(πD) and the NA through its own
    radius. Ties go to the shorter focal length, then to name order.
    """
    if not catalog.entries:
        raise DomainError("lens catalog is empty")
    ordered = sorted(catalog.entries, key=lambda entry: (entry.focal_length, entry.name))

    seen = {}
    duplicate = False
    for entry in ordered:
        key = (entry.focal_length, entry.diameter)
        if key in seen:
            duplicate = True
            logger.warning(f"Lens '{entry.name}' duplicates '{seen[key]}' (same focal length and diameter)")
        else:
            seen[key] = entry.name

    def run(entry):
        return evaluate_lens(spec, entry.focal_length, lens_radius=entry.diameter / 2.0)

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(run, ordered))
    else:
        points = [run(entry) for entry in ordered]

    signals = np.array([point.figure.detected_signal for point in points])
    best = int(np.argmax(signals))
    entry, point = ordered[best], points[best]
    table = pd.DataFrame({
        "name": [e.name for e in ordered],
        "focal_length_m": [e.focal_length for e in ordered],
        "diameter_m": [e.diameter for e in ordered],
        "waist_radius_m": [p.beam.waist_radius for p in points],
        "rayleigh_length_m": [p.beam.rayleigh_length for p in points],
        "numerical_aperture": [p.collection.numerical_aperture for p in points],
        "detected_signal": signals,
    })
    return LensRecommendation(
        name=entry.name,
        focal_length=entry.focal_length,
        diameter=entry.diameter,
        detected_signal=float(signals[best]),
        waist_radius=point.beam.waist_radius,
        rayleigh_length=point.beam.rayleigh_length,
        duplicate_warning=duplicate,
        table=table,
    )


def _lrcfm_reference(spec, workers=1):
    if spec.variable is SweepVariable.DETECTION_PROPORTION:
        base = spec.with_grid(spec.default_grid(), SweepVariable.RAYLEIGH_LENGTH)
    else:
        base = _rayleigh_spec(spec)
    optimum = optimal_rayleigh(base, workers=workers)
    return base, evaluate_lens(base, optimum.focal_length, proportion=1.0).figure


def _cfm_point(base, cfm_focal):
    if not cfm_focal > 0:
        raise DomainError(f"CFM focal length must be > 0, got {cfm_focal!r}")
    return evaluate_lens(base, cfm_focal, proportion=1.0)


def _cfm_signal(cfm, proportion):
    return collection.detected_signal(
        cfm.detection_volume, cfm.i_cw, cfm.polarization, cfm.detection_rate, proportion, cfm.density
    )


def cfm_comparison(spec, cfm_focal, proportion_grid, workers=1):
    """
    LRCFM/CFM detected-signal ratio over CFM detection proportion and CFM beam waist.

    The LRCFM side sits at its optimal Rayleigh length with detection
    proportion 1. Each CFM focal length sets the CFM excitation waist with
    the same beam, power, sample and lens radius.

    Args:
        spec (SweepSpec): Fixed context.
        cfm_focal (float | Sequence[float]): One or more CFM focal lengths [m].
        proportion_grid (Sequence[float]): CFM detection proportions in (0, 1].

    Returns:
        pandas.DataFrame: Columns proportion, cfm_focal_length_m,
        cfm_waist_radius_m, ratio; proportions vary fastest.
    """
    proportions = [float(p) for p in proportion_grid]
    if any(not 0 < p <= 1 for p in proportions):
        raise DomainError("CFM detection proportions must lie in (0, 1]")
    focals = [float(f) for f in np.atleast_1d(cfm_focal)]
    base, lrcfm = _lrcfm_reference(spec, workers)
    rows = []
    for focal in focals:
        cfm = _cfm_point(base, focal)
        for p in proportions:
            rows.append([p, focal, cfm.beam.waist_radius, lrcfm.detected_signal / _cfm_signal(cfm.figure, p)])
    return pd.DataFrame(rows, columns=["proportion", "cfm_focal_length_m", "cfm_waist_radius_m", "ratio"])


def cfm_threshold(spec, cfm_focal, target=1e4, lower=1e-15, workers=1):
    """
    Largest CFM detection proportion p* at which the LRCFM/CFM ratio still
    reaches `target`; found by bisection (brentq) on the log-ratio curve.

    Returns:
        float | None: p*, 1.0 when the ratio exceeds the target everywhere,
        None when it never does above `lower`.
    """
    base, lrcfm = _lrcfm_reference(spec, workers)
    cfm = _cfm_point(base, cfm_focal).figure

    def excess(log_p):
        return math.log(lrcfm.detected_signal / _cfm_signal(cfm, math.exp(log_p))) - math.log(target)

    if excess(0.0) >= 0:
        return 1.0
    if excess(math.log(lower)) < 0:
        logger.warning(f"LRCFM/CFM ratio stays below {target:g} down to proportion {lower:g}")
        return None
    threshold = math.exp(brentq(excess, math.log(lower), 0.0, xtol=1e-12))
    logger.info(f"LRCFM/CFM ratio exceeds {target:g} below CFM detection proportion p* = {threshold:.6g}")
    return threshold

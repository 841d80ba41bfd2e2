"""
Spatial maps of fitted quantities (π time, T1, T2) and the synthetic
multi-pixel generator used to check them.

Coordinates are meters internally; CSV files carry micrometers.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

import pulse_fit
from pulse_fit import FitModel, ModelKind, TimeSeries
from util import ConfigError, DomainError, LrcfmError, MappingError, NoValidPixelsError, atomic_write_frame

logger = logging.getLogger(__name__)

UM = 1e-6
SNAP_FRACTION = 0.01
# Free-induction decay of an unrefocused pulse is this much faster than the echo
T2_STAR_FRACTION = 1.0 / 20.0
PULSE_PLAN_COLUMNS = ["x_um", "y_um", "pi_time_s", "pi_half_time_s"]


class Quantity(str, Enum):
    PI_TIME = "pi_time"
    T1 = "t1"
    T2 = "t2"
    CUSTOM = "custom"


@dataclass(frozen=True, eq=False)
class PixelMap:
    """nx×ny grid of values; NaN marks a missing (failed) pixel."""

    origin: tuple
    pitch: float
    values: np.ndarray
    quantity: Quantity = Quantity.CUSTOM
    units: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DomainError(f"map values must be a non-empty 2-D grid, got shape {values.shape}")
        if np.any(np.isinf(values)):
            raise DomainError("map values must be finite or missing")
        if not self.pitch > 0:
            raise DomainError(f"pitch must be > 0, got {self.pitch!r}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "quantity", Quantity(self.quantity))

    @property
    def nx(self):
        return self.values.shape[0]

    @property
    def ny(self):
        return self.values.shape[1]

    def coordinates(self, ix, iy):
        return self.origin[0] + ix * self.pitch, self.origin[1] + iy * self.pitch

    def scaled(self, factor):
        return replace(self, values=self.values * factor)

    def __eq__(self, other):
        if not isinstance(other, PixelMap):
            return NotImplemented
        return (
            self.origin == other.origin
            and self.pitch == other.pitch
            and self.quantity == other.quantity
            and self.units == other.units
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    def to_frame(self):
        rows = []
        for ix in range(self.nx):
            for iy in range(self.ny):
                x, y = self.coordinates(ix, iy)
                rows.append([x / UM, y / UM, self.values[ix, iy], self.units])
        return pd.DataFrame(rows, columns=["x_um", "y_um", "value", "units"])

    def to_dict(self):
        return {
            "origin": list(self.origin),
            "pitch": self.pitch,
            "nx": self.nx,
            "ny": self.ny,
            "quantity": self.quantity.value,
            "units": self.units,
            "values": [[None if math.isnan(v) else float(v) for v in row] for row in self.values],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
            values = np.array(
                [[math.nan if v is None else float(v) for v in row] for row in data["values"]], dtype=float
            )
            return cls(tuple(data["origin"]), float(data["pitch"]), values, data["quantity"], data["units"])
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"malformed map JSON: {e}") from e


@dataclass(frozen=True)
class MapStats:
    mean: float
    std: float
    min: float
    max: float
    n_valid: int
    n_missing: int

    def to_dict(self):
        return {
            "mean": self.mean,
            "std": self.std,
            "min": self.min,
            "max": self.max,
            "n_valid": self.n_valid,
            "n_missing": self.n_missing,
        }


def stats(pixel_map):
    """Mean, population std (divisor n), min and max over the valid pixels."""
    values = pixel_map.values
    valid = values[np.isfinite(values)]
    if valid.size == 0:
        raise NoValidPixelsError()
    return MapStats(
        mean=float(np.mean(valid)),
        std=float(np.std(valid, ddof=0)),
        min=float(np.min(valid)),
        max=float(np.max(valid)),
        n_valid=int(valid.size),
        n_missing=int(values.size - valid.size),
    )


def _default_derive(model):
    if model.kind is ModelKind.RABI:
        return pulse_fit.pi_time, Quantity.PI_TIME, "s"
    quantity = Quantity.T1 if model.kind is ModelKind.T1 else Quantity.T2
    return (lambda result: result.param("a2")), quantity, "s"


def _snap(records, pitch):
    origin = (min(r[0] for r in records), min(r[1] for r in records))
    tolerance = SNAP_FRACTION * pitch
    cells = {}
    for index, (x, y, _) in enumerate(records):
        ix = round((x - origin[0]) / pitch)
        iy = round((y - origin[1]) / pitch)
        if abs(x - origin[0] - ix * pitch) > tolerance or abs(y - origin[1] - iy * pitch) > tolerance:
            raise MappingError(
                f"record {index} at ({x / UM:.4f} um, {y / UM:.4f} um) is off the {pitch / UM:g} um grid"
            )
        if (ix, iy) in cells:
            raise MappingError(
                f"record {index} at ({x / UM:.4f} um, {y / UM:.4f} um) duplicates record {cells[(ix, iy)]}"
            )
        cells[(ix, iy)] = index
    return origin, cells


def _infer_pitch(xs, ys, path):
    steps = np.concatenate([np.diff(np.unique(xs)), np.diff(np.unique(ys))])
    if steps.size == 0:
        raise ConfigError("cannot infer the pitch of a single-pixel grid", path=path)
    return float(np.min(steps))


def assemble(records, model, pitch, derive=None, quantity=None, units=None, workers=1, progress=False):
    """
    Fit every pixel record and place the derived value on the map grid.

    Coordinates snap to the grid anchored at the smallest x and y within
    pitch/100. Pixels whose fit fails or does not converge are missing.

    Args:
        records (list): (x [m], y [m], TimeSeries) per pixel.
        model (FitModel | str): Model fitted to every pixel (auto_init).
        pitch (float): Pixel size [m].
        derive (callable | None): FitResult → scalar. Defaults to pi_time
            for rabi and a2 for t1/t2.
        quantity (Quantity | None), units (str | None): Labels for a custom derive.
        workers (int): Thread-pool size for the per-pixel fits.

    Returns:
        PixelMap
    """
    model = FitModel.of(model)
    records = list(records)
    if not records:
        raise MappingError("no pixel records")
    if not pitch > 0:
        raise DomainError(f"pitch must be > 0, got {pitch!r}")
    origin, cells = _snap(records, pitch)

    if derive is None:
        derive, default_quantity, default_units = _default_derive(model)
    else:
        default_quantity, default_units = Quantity.CUSTOM, ""
    quantity = Quantity(quantity) if quantity is not None else default_quantity
    units = units if units is not None else default_units

    ordered = sorted(cells.items())

    def run(item):
        (ix, iy), index = item
        x, y, series = records[index]
        try:
            result = pulse_fit.fit(model, series)
            if not result.converged:
                logger.warning(f"Pixel ({ix}, {iy}) fit did not converge; marking missing")
                return math.nan
            value = float(derive(result))
        except LrcfmError as e:
            logger.warning(f"Pixel ({ix}, {iy}) failed: {e}")
            return math.nan
        return value if math.isfinite(value) else math.nan

    with tqdm(total=len(ordered), desc=f"fit {model.kind.value}", disable=not progress, leave=False) as bar:
        def tracked(item):
            value = run(item)
            bar.update(1)
            return value

        if workers and workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                values = list(pool.map(tracked, ordered))
        else:
            values = [tracked(item) for item in ordered]

    nx = max(ix for ix, _ in cells) + 1
    ny = max(iy for _, iy in cells) + 1
    grid = np.full((nx, ny), math.nan)
    for ((ix, iy), _), value in zip(ordered, values):
        grid[ix, iy] = value
    pixel_map = PixelMap(origin, pitch, grid, quantity, units)
    missing = int(np.count_nonzero(np.isnan(grid)))
    if missing:
        logger.info(f"{missing} of {grid.size} pixels missing in the {quantity.value} map")
    return pixel_map


def pulse_efficiency(applied_pi_time, true_pi_time):
    """Fraction of the population a pulse of length `applied` inverts when π takes `true`."""
    applied = np.asarray(applied_pi_time, dtype=float)
    true = np.asarray(true_pi_time, dtype=float)
    if np.any(true <= 0) or np.any(applied < 0):
        raise DomainError("pi times must be > 0")
    return np.sin(0.5 * math.pi * applied / true) ** 2


def pulse_plan(pi_map):
    """
    Per-pixel π and π/2 pulse durations taken from a π-time map.

    Returns:
        pandas.DataFrame: Columns x_um, y_um, pi_time_s, pi_half_time_s;
        missing pixels stay empty.
    """
    if pi_map.quantity is not Quantity.PI_TIME:
        raise DomainError(f"a pulse plan needs a pi_time map, got {pi_map.quantity.value}")
    frame = pi_map.to_frame()
    return pd.DataFrame({
        "x_um": frame["x_um"],
        "y_um": frame["y_um"],
        "pi_time_s": frame["value"],
        "pi_half_time_s": frame["value"] / 2.0,
    })


@dataclass(frozen=True, eq=False)
class TruthField:
    """Per-pixel true model parameters and, optionally, true and applied π times."""

    model: ModelKind
    origin: tuple
    pitch: float
    params: np.ndarray
    pi_time: np.ndarray = None
    applied_pi_time: np.ndarray = None

    def __post_init__(self):
        model = FitModel.of(self.model)
        object.__setattr__(self, "model", model.kind)
        params = np.array(self.params, dtype=float)
        if params.ndim != 3 or params.shape[2] != model.arity or params.shape[0] < 1 or params.shape[1] < 1:
            raise DomainError(f"truth params must have shape (nx, ny, {model.arity}), got {params.shape}")
        for ix in range(params.shape[0]):
            for iy in range(params.shape[1]):
                model.check_params(params[ix, iy])
        object.__setattr__(self, "params", params)
        if not self.pitch > 0:
            raise DomainError(f"pitch must be > 0, got {self.pitch!r}")
        for name in ("pi_time", "applied_pi_time"):
            value = getattr(self, name)
            if value is None:
                continue
            value = np.array(value, dtype=float)
            if value.shape != params.shape[:2]:
                raise DomainError(f"{name} must have shape {params.shape[:2]}, got {value.shape}")
            if not np.all(value > 0):
                raise DomainError(f"{name} values must be > 0")
            object.__setattr__(self, name, value)
        if self.applied_pi_time is not None and self.pi_time is None:
            raise DomainError("applied pi times need true pi times")

    @property
    def nx(self):
        return self.params.shape[0]

    @property
    def ny(self):
        return self.params.shape[1]

    def coordinates(self, ix, iy):
        return self.origin[0] + ix * self.pitch, self.origin[1] + iy * self.pitch

    def field_of(self, name):
        """nx×ny array of one parameter, e.g. 'a2'."""
        return self.params[:, :, PARAM_INDEX[self.model][name]]

    def with_applied_pi_time(self, applied):
        applied = np.broadcast_to(np.asarray(applied, dtype=float), self.params.shape[:2])
        return replace(self, applied_pi_time=applied.copy())

    def with_pulse_plan(self, plan):
        """
        Apply the per-pixel π times of a pulse plan (a pi_time PixelMap).

        Every truth pixel must sit on a plan pixel within pitch/100. Plan
        pixels whose π fit failed get the mean of the valid ones. Without
        true π times the plan is taken as the truth, i.e. perfect pulses.
        """
        if self.model is ModelKind.RABI:
            raise DomainError("a pulse plan applies to t1/t2 fields")
        if plan.quantity is not Quantity.PI_TIME:
            raise DomainError(f"a pulse plan needs a pi_time map, got {plan.quantity.value}")
        fallback = stats(plan).mean
        tolerance = SNAP_FRACTION * min(self.pitch, plan.pitch)
        applied = np.empty(self.params.shape[:2])
        filled = 0
        for ix in range(self.nx):
            for iy in range(self.ny):
                x, y = self.coordinates(ix, iy)
                jx = round((x - plan.origin[0]) / plan.pitch)
                jy = round((y - plan.origin[1]) / plan.pitch)
                px, py = plan.coordinates(jx, jy)
                if not (0 <= jx < plan.nx and 0 <= jy < plan.ny) or max(abs(px - x), abs(py - y)) > tolerance:
                    raise MappingError(f"pulse plan has no pixel at ({x / UM:.4f} um, {y / UM:.4f} um)")
                value = plan.values[jx, jy]
                if math.isnan(value):
                    value, filled = fallback, filled + 1
                applied[ix, iy] = value
        if filled:
            logger.warning(f"{filled} pixels without a planned pi time use the plan mean {fallback:.6g} s")
        true_pi = self.pi_time if self.pi_time is not None else applied.copy()
        return replace(self, pi_time=true_pi, applied_pi_time=applied)


PARAM_INDEX = {kind: {name: i for i, name in enumerate(names)} for kind, names in pulse_fit.PARAM_NAMES.items()}

DEFAULT_CENTER = {
    ModelKind.RABI: (0.1, 2e-6, 5e6, 0.0, 1.0),
    ModelKind.T1: (0.2, 11.0e-3, 1.0),
    ModelKind.T2: (1.0, 21.5e-6, 1.5),
}


def gradient_field(model, nx=7, ny=21, pitch=50 * UM, origin=(0.0, 0.0), center=None, gradient=0.2,
                   scatter=0.0, seed=0, pi_time=None, pi_gradient=0.4, applied_pi_time=None):
    """
    Smoothly varying truth field on an nx×ny grid.

    The model's time parameter (a3 for rabi, a2 for t1/t2) changes linearly
    along x by `gradient` (total relative change) around `center`, with an
    optional seeded per-pixel relative `scatter`. For t1/t2, `pi_time`
    (center value) varies along y by `pi_gradient`; `applied_pi_time` is a
    single global value, or None to apply each pixel's true π time.
    """
    model = FitModel.of(model)
    if nx < 1 or ny < 1:
        raise DomainError("a truth field needs nx, ny >= 1")
    center = np.array(DEFAULT_CENTER[model.kind] if center is None else center, dtype=float)
    model.check_params(center)
    varied = 2 if model.kind is ModelKind.RABI else 1

    params = np.empty((nx, ny, model.arity))
    for ix in range(nx):
        along = ix / (nx - 1) - 0.5 if nx > 1 else 0.0
        for iy in range(ny):
            value = center.copy()
            factor = 1.0 + gradient * along
            if scatter:
                rng = np.random.default_rng([seed, ix * ny + iy, 1])
                factor *= 1.0 + scatter * rng.standard_normal()
            value[varied] *= factor
            params[ix, iy] = value

    true_pi = applied = None
    if model.kind is ModelKind.RABI:
        true_pi = 1.0 / (2.0 * params[:, :, 2])
    elif pi_time is not None:
        across = np.array([iy / (ny - 1) - 0.5 if ny > 1 else 0.0 for iy in range(ny)])
        true_pi = np.tile(pi_time * (1.0 + pi_gradient * across), (nx, 1))
        applied = true_pi.copy() if applied_pi_time is None else np.full((nx, ny), float(applied_pi_time))
    return TruthField(model.kind, tuple(origin), pitch, params, true_pi, applied)


def default_tau(truth, points=None, tau_max=None):
    """Uniform delay grid starting at 0 that resolves the slowest pixel."""
    if truth.model is ModelKind.RABI:
        tau_max = tau_max or 10.0 / float(np.min(truth.field_of("a3")))
        points = points or 201
    elif truth.model is ModelKind.T1:
        tau_max = tau_max or 5.0 * float(np.max(truth.field_of("a2")))
        points = points or 101
    else:
        tau_max = tau_max or 3.0 * float(np.max(truth.field_of("a2")))
        points = points or 101
    if not tau_max > 0 or points < 2:
        raise DomainError("tau grid needs tau_max > 0 and at least two points")
    return np.linspace(0.0, tau_max, points)


def _pixel_signal(truth, model, params, tau, ix, iy):
    curve = model.evaluate(tau, params)
    if truth.pi_time is None or truth.model is ModelKind.RABI:
        return curve
    applied = truth.applied_pi_time if truth.applied_pi_time is not None else truth.pi_time
    efficiency = float(pulse_efficiency(applied[ix, iy], truth.pi_time[ix, iy]))
    if truth.model is ModelKind.T1:
        return efficiency * params[0] * np.exp(-tau / params[1]) + params[2]
    t2_star = T2_STAR_FRACTION * params[1]
    return efficiency * curve + (1.0 - efficiency) * params[0] * np.exp(-2.0 * tau / t2_star)


def synth_map(truth, noise_sigma, seed, tau=None):
    """
    Synthetic per-pixel series for a truth field.

    Each pixel draws its additive Gaussian noise from
    numpy.random.default_rng([seed, pixel_index]) with pixel_index = ix·ny + iy,
    so the output does not depend on generation order.

    Returns:
        list: (x [m], y [m], TimeSeries) in pixel-index order.
    """
    if not noise_sigma >= 0:
        raise DomainError(f"noise sigma must be >= 0, got {noise_sigma!r}")
    model = FitModel(truth.model)
    tau = default_tau(truth) if tau is None else np.asarray(tau, dtype=float)

    records = []
    for ix in range(truth.nx):
        for iy in range(truth.ny):
            signal = _pixel_signal(truth, model, truth.params[ix, iy], tau, ix, iy)
            if noise_sigma > 0:
                rng = np.random.default_rng([seed, ix * truth.ny + iy])
                signal = signal + rng.normal(0.0, noise_sigma, tau.size)
            x, y = truth.coordinates(ix, iy)
            records.append((x, y, TimeSeries(tau.copy(), signal)))
    return records


def write_truth_field(path, truth):
    names = list(pulse_fit.PARAM_NAMES[truth.model])
    rows = []
    for ix in range(truth.nx):
        for iy in range(truth.ny):
            x, y = truth.coordinates(ix, iy)
            row = [x / UM, y / UM, *truth.params[ix, iy]]
            if truth.pi_time is not None:
                applied = truth.applied_pi_time if truth.applied_pi_time is not None else truth.pi_time
                row += [truth.pi_time[ix, iy], applied[ix, iy]]
            rows.append(row)
    columns = ["x_um", "y_um", *names]
    if truth.pi_time is not None:
        columns += ["pi_time_s", "applied_pi_time_s"]
    return atomic_write_frame(pd.DataFrame(rows, columns=columns), path)


def read_truth_field(path, model, pitch=None):
    """
    Read a truth-field CSV (x_um,y_um,a1..an[,pi_time_s,applied_pi_time_s]).

    The pitch is inferred from the coordinate spacing unless given [m].
    """
    model = FitModel.of(model)
    path = Path(path)
    if not path.is_file():
        raise ConfigError("truth field not found", path=path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read truth field: {e}", path=path) from e
    names = list(model.param_names)
    expected = ["x_um", "y_um", *names]
    columns = list(frame.columns)
    if columns not in (expected, expected + ["pi_time_s", "applied_pi_time_s"]):
        raise ConfigError(f"truth header must be {','.join(expected)}[,pi_time_s,applied_pi_time_s]", path=path)

    if pitch is None:
        pitch = _infer_pitch(frame["x_um"].to_numpy(dtype=float) * UM, frame["y_um"].to_numpy(dtype=float) * UM, path)
    records = [(row.x_um * UM, row.y_um * UM, i) for i, row in enumerate(frame.itertuples(index=False))]
    try:
        origin, cells = _snap(records, pitch)
    except MappingError as e:
        raise ConfigError(str(e), path=path) from e
    nx = max(ix for ix, _ in cells) + 1
    ny = max(iy for _, iy in cells) + 1
    if len(cells) != nx * ny:
        raise ConfigError(f"truth field covers {len(cells)} of {nx * ny} grid pixels", path=path)

    params = np.empty((nx, ny, model.arity))
    has_pi = "pi_time_s" in frame
    true_pi = np.empty((nx, ny)) if has_pi else None
    applied = np.empty((nx, ny)) if has_pi else None
    for (ix, iy), index in cells.items():
        row = frame.iloc[index]
        params[ix, iy] = row[names].to_numpy(dtype=float)
        if has_pi:
            true_pi[ix, iy] = row["pi_time_s"]
            applied[ix, iy] = row["applied_pi_time_s"]
    try:
        return TruthField(model.kind, origin, pitch, params, true_pi, applied)
    except DomainError as e:
        raise ConfigError(str(e), path=path) from e


def read_pulse_plan(path, pitch=None):
    """
    Read a pulse-plan CSV (x_um,y_um,pi_time_s,pi_half_time_s) back into a π-time map.

    The pitch is inferred from the coordinate spacing unless given [m];
    empty π cells are missing pixels.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError("pulse plan not found", path=path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read pulse plan: {e}", path=path) from e
    if list(frame.columns) != PULSE_PLAN_COLUMNS:
        raise ConfigError(f"pulse plan header must be {','.join(PULSE_PLAN_COLUMNS)}", path=path)
    if frame.empty:
        raise ConfigError("pulse plan has no rows", path=path)

    xs = frame["x_um"].to_numpy(dtype=float) * UM
    ys = frame["y_um"].to_numpy(dtype=float) * UM
    if pitch is None:
        pitch = _infer_pitch(xs, ys, path)
    records = [(x, y, None) for x, y in zip(xs, ys)]
    try:
        origin, cells = _snap(records, pitch)
    except MappingError as e:
        raise ConfigError(str(e), path=path) from e
    nx = max(ix for ix, _ in cells) + 1
    ny = max(iy for _, iy in cells) + 1
    values = np.full((nx, ny), math.nan)
    pi_times = frame["pi_time_s"].to_numpy(dtype=float)
    for (ix, iy), index in cells.items():
        values[ix, iy] = pi_times[index]
    try:
        return PixelMap(origin, pitch, values, Quantity.PI_TIME, "s")
    except DomainError as e:
        raise ConfigError(str(e), path=path) from e

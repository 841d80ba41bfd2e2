"""
Least-squares fitting of Rabi, T1 and stretched-exponential T2 curves.

Models (τ in seconds):
    rabi: a1·exp(−τ/a2)·cos(2π·a3·τ + a4) + a5
    t1:   a1·exp(−τ/a2) + a3
    t2:   a1·exp(−(τ/a2)^a3)
"""
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import least_squares

from util import ConfigError, DomainError, NumericalError, UnidentifiableError, atomic_write_frame, atomic_write_text

logger = logging.getLogger(__name__)

XTOL = 1e-8
MAX_ITERATIONS = 200
MIN_SPECTRAL_POINTS = 8
# log-parameters are clipped here so exp() stays finite
_LOG_LIMIT = 700.0


class ModelKind(str, Enum):
    RABI = "rabi"
    T1 = "t1"
    T2 = "t2"


PARAM_NAMES = {
    ModelKind.RABI: ("a1", "a2", "a3", "a4", "a5"),
    ModelKind.T1: ("a1", "a2", "a3"),
    ModelKind.T2: ("a1", "a2", "a3"),
}

# Parameters fitted through their logarithm, per model
_LOG_PARAMS = {
    ModelKind.RABI: (1,),
    ModelKind.T1: (1,),
    ModelKind.T2: (1, 2),
}


@dataclass(frozen=True)
class FitModel:
    kind: ModelKind

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))

    @classmethod
    def of(cls, kind):
        return kind if isinstance(kind, FitModel) else cls(ModelKind(kind))

    @property
    def arity(self):
        return len(PARAM_NAMES[self.kind])

    @property
    def param_names(self):
        return PARAM_NAMES[self.kind]

    def check_params(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.arity,):
            raise DomainError(f"{self.kind.value} model takes {self.arity} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise DomainError("parameters must be finite")
        if not params[1] > 0:
            raise DomainError(f"a2 must be > 0, got {params[1]!r}")
        if self.kind is ModelKind.T2 and not params[2] > 0:
            raise DomainError(f"stretching exponent a3 must be > 0, got {params[2]!r}")
        return params

    def evaluate(self, tau, params):
        tau = np.asarray(tau, dtype=float)
        a = params
        if self.kind is ModelKind.RABI:
            return a[0] * np.exp(-tau / a[1]) * np.cos(2.0 * math.pi * a[2] * tau + a[3]) + a[4]
        if self.kind is ModelKind.T1:
            return a[0] * np.exp(-tau / a[1]) + a[2]
        return a[0] * np.exp(-((tau / a[1]) ** a[2]))

    def jacobian(self, tau, params):
        """∂f/∂a_i at each τ, shape (len(tau), arity)."""
        tau = np.asarray(tau, dtype=float)
        a = params
        if self.kind is ModelKind.RABI:
            decay = np.exp(-tau / a[1])
            phase = 2.0 * math.pi * a[2] * tau + a[3]
            cos_term = decay * np.cos(phase)
            sin_term = decay * np.sin(phase)
            return np.column_stack([
                cos_term,
                a[0] * cos_term * tau / a[1] ** 2,
                -a[0] * sin_term * 2.0 * math.pi * tau,
                -a[0] * sin_term,
                np.ones_like(tau),
            ])
        if self.kind is ModelKind.T1:
            decay = np.exp(-tau / a[1])
            return np.column_stack([decay, a[0] * decay * tau / a[1] ** 2, np.ones_like(tau)])

        ratio = tau / a[1]
        u = ratio ** a[2]
        decay = np.exp(-u)
        weighted = np.where(decay > 0, decay * u, 0.0)
        # u·ln(τ/a2) → 0 as τ → 0
        with np.errstate(divide="ignore", invalid="ignore"):
            log_ratio = np.where(tau > 0, np.log(np.where(tau > 0, ratio, 1.0)), 0.0)
        return np.column_stack([
            decay,
            a[0] * weighted * a[2] / a[1],
            -a[0] * weighted * log_ratio,
        ])


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Pulse-sequence readings: delay τ [s], signal and optional per-point σ."""

    tau: np.ndarray
    signal: np.ndarray
    sigma: np.ndarray = None

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float).ravel()
        signal = np.asarray(self.signal, dtype=float).ravel()
        if tau.shape != signal.shape:
            raise DomainError(f"tau and signal lengths differ ({tau.size} vs {signal.size})")
        if tau.size < 2:
            raise DomainError("a time series needs at least two points")
        if not (np.all(np.isfinite(tau)) and np.all(np.isfinite(signal))):
            raise DomainError("time series contains NaN or infinite values")
        if np.any(np.diff(tau) <= 0):
            raise DomainError("tau must be strictly increasing")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "signal", signal)
        if self.sigma is not None:
            sigma = np.asarray(self.sigma, dtype=float).ravel()
            if sigma.shape != tau.shape:
                raise DomainError("sigma length differs from tau")
            if not np.all(sigma > 0) or not np.all(np.isfinite(sigma)):
                raise DomainError("sigma values must be finite and > 0")
            object.__setattr__(self, "sigma", sigma)

    def __len__(self):
        return self.tau.size

    @property
    def weights(self):
        return np.ones_like(self.tau) if self.sigma is None else 1.0 / self.sigma

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        same_sigma = (self.sigma is None and other.sigma is None) or (
            self.sigma is not None and other.sigma is not None and np.array_equal(self.sigma, other.sigma)
        )
        return np.array_equal(self.tau, other.tau) and np.array_equal(self.signal, other.signal) and same_sigma


@dataclass(frozen=True, eq=False)
class FitResult:
    model: ModelKind
    params: np.ndarray
    covariance: np.ndarray
    residual_rms: float
    converged: bool
    iterations: int
    message: str = field(default="", compare=False)

    def param(self, name):
        return float(self.params[PARAM_NAMES[ModelKind(self.model)].index(name)])

    def to_dict(self):
        return {
            "model": ModelKind(self.model).value,
            "params": [float(v) for v in self.params],
            "covariance": [[float(v) for v in row] for row in self.covariance],
            "residual_rms": float(self.residual_rms),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            model = FitModel.of(data["model"])
            params = np.asarray(data["params"], dtype=float)
            covariance = np.asarray(data["covariance"], dtype=float)
            if params.shape != (model.arity,) or covariance.shape != (model.arity, model.arity):
                raise ValueError("parameter and covariance shapes do not match the model")
            return cls(model.kind, params, covariance, float(data["residual_rms"]),
                       bool(data["converged"]), int(data["iterations"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"malformed fit result: {e}") from e

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed fit result JSON: {e}") from e
        return cls.from_dict(data)


def _to_internal(model, params):
    internal = np.array(params, dtype=float)
    for i in _LOG_PARAMS[model.kind]:
        internal[i] = math.log(internal[i])
    return internal


def _to_physical(model, internal):
    params = np.array(internal, dtype=float)
    for i in _LOG_PARAMS[model.kind]:
        params[i] = math.exp(min(max(params[i], -_LOG_LIMIT), _LOG_LIMIT))
    return params


def _canonical_rabi(params, covariance):
    """Fold sign ambiguities into a4 and wrap it into (−π, π]."""
    params = params.copy()
    signs = np.ones(params.size)
    if params[2] < 0:
        params[2], params[3] = -params[2], -params[3]
        signs[2] *= -1
        signs[3] *= -1
    if params[0] < 0:
        params[0] = -params[0]
        params[3] += math.pi
        signs[0] *= -1
    params[3] = math.pi - (math.pi - params[3]) % (2.0 * math.pi)
    return params, covariance * np.outer(signs, signs)


def _check_identifiable(model, data):
    if np.ptp(data.signal) == 0:
        raise UnidentifiableError(f"constant signal carries no information for a {model.kind.value} fit")
    if len(data) < model.arity + 1:
        raise DomainError(f"{model.kind.value} fit needs at least {model.arity + 1} points, got {len(data)}")


def fit(model, data, init=None):
    """
    Weighted least-squares fit of `model` to `data` by Levenberg–Marquardt.

    a2 (and the t2 stretching exponent) are optimized through their logarithm,
    which keeps them positive. Residuals are (f(τ) − y)/σ with σ = 1 when
    the series carries none.

    Args:
        model (FitModel | str): Model to fit.
        data (TimeSeries): Measured series.
        init (sequence | None): Starting parameters; auto_init when None.

    Returns:
        FitResult: `converged` is False when the step tolerance was not met;
        the best iterate is returned either way.
    """
    model = FitModel.of(model)
    _check_identifiable(model, data)
    start = auto_init(model, data) if init is None else model.check_params(init)

    weights = data.weights
    log_params = _LOG_PARAMS[model.kind]

    def residuals(internal):
        return (model.evaluate(data.tau, _to_physical(model, internal)) - data.signal) * weights

    def jacobian(internal):
        params = _to_physical(model, internal)
        jac = model.jacobian(data.tau, params) * weights[:, None]
        for i in log_params:
            jac[:, i] *= params[i]
        return jac

    try:
        result = least_squares(
            residuals,
            _to_internal(model, start),
            jac=jacobian,
            method="lm",
            x_scale="jac",
            xtol=XTOL,
            ftol=1e-14,
            gtol=1e-14,
            max_nfev=4 * MAX_ITERATIONS,
        )
    except ValueError as e:
        raise NumericalError(f"{model.kind.value} fit failed: {e}", {"init": list(map(float, start))}) from e

    params = _to_physical(model, result.x)
    if not np.all(np.isfinite(params)):
        raise NumericalError(f"{model.kind.value} fit diverged", {"params": list(map(float, params))})

    jac = model.jacobian(data.tau, params) * weights[:, None]
    dof = len(data) - model.arity
    variance = float(np.sum(result.fun**2)) / dof
    # columns span many decades (a2 in s, a3 in Hz); equilibrate before inverting
    norms = np.linalg.norm(jac, axis=0)
    norms[norms == 0] = 1.0
    scaled = jac / norms
    covariance = variance * np.linalg.pinv(scaled.T @ scaled) / np.outer(norms, norms)
    covariance = 0.5 * (covariance + covariance.T)
    if model.kind is ModelKind.RABI:
        params, covariance = _canonical_rabi(params, covariance)

    iterations = int(result.njev if result.njev is not None else result.nfev)
    converged = bool(result.success) and iterations <= MAX_ITERATIONS
    residual_rms = float(np.sqrt(np.mean((model.evaluate(data.tau, params) - data.signal) ** 2)))
    if not converged:
        logger.warning(f"{model.kind.value} fit did not converge after {iterations} iterations: {result.message}")
    return FitResult(model.kind, params, covariance, residual_rms, converged, iterations, result.message)


def _dominant_frequency(tau, signal):
    uniform = np.linspace(tau[0], tau[-1], tau.size)
    resampled = np.interp(uniform, tau, signal)
    resampled = resampled - resampled.mean()
    step = uniform[1] - uniform[0]
    padded = 8 * tau.size
    spectrum = np.abs(np.fft.rfft(resampled, n=padded))
    freqs = np.fft.rfftfreq(padded, d=step)
    k = int(np.argmax(spectrum[1:])) + 1
    if 1 < k < spectrum.size - 1:
        left, mid, right = spectrum[k - 1], spectrum[k], spectrum[k + 1]
        curvature = left - 2.0 * mid + right
        if curvature < 0:
            shift = 0.5 * (left - right) / curvature
            return float(freqs[k] + shift * (freqs[1] - freqs[0]))
    return float(freqs[k])


def _rabi_init(data):
    tau, y = data.tau, data.signal
    span = tau[-1] - tau[0]
    a2 = span / 2.0
    a5 = float(np.mean(y))
    if len(data) < MIN_SPECTRAL_POINTS:
        logger.warning(
            f"Only {len(data)} points for the Rabi spectral estimate; using default initial parameters"
        )
        return np.array([2.0 * float(np.std(y)), a2, 2.0 / span, 0.0, a5])

    a3 = _dominant_frequency(tau, y)
    decay = np.exp(-tau / a2)
    basis = np.column_stack([
        decay * np.cos(2.0 * math.pi * a3 * tau),
        decay * np.sin(2.0 * math.pi * a3 * tau),
        np.ones_like(tau),
    ])
    (c, s, offset), *_ = np.linalg.lstsq(basis, y, rcond=None)
    a1 = math.hypot(c, s)
    if a1 == 0:
        return np.array([2.0 * float(np.std(y)), a2, a3, 0.0, a5])
    return np.array([a1, a2, a3, math.atan2(-s, c), float(offset)])


def _decay_init(model, data):
    tau, y = data.tau, data.signal
    tail = max(3, len(data) // 10)
    asymptote = float(np.mean(y[-tail:])) if model.kind is ModelKind.T1 else 0.0
    amplitude = float(y[0]) - asymptote
    if amplitude == 0:
        amplitude = float(np.ptp(y))

    normalized = (y - asymptote) / amplitude
    below = np.nonzero(normalized <= math.exp(-1.0))[0]
    span = tau[-1] - tau[0]
    if below.size == 0:
        a2 = span
    elif below[0] == 0:
        a2 = max(tau[0], span / len(data))
    else:
        i = below[0]
        z0, z1 = normalized[i - 1], normalized[i]
        fraction = (z0 - math.exp(-1.0)) / (z0 - z1) if z0 != z1 else 0.0
        a2 = tau[i - 1] + fraction * (tau[i] - tau[i - 1])
    if not a2 > 0:
        a2 = span / len(data)

    third = asymptote if model.kind is ModelKind.T1 else 1.0
    return np.array([amplitude, a2, third])


def auto_init(model, data):
    """
    Starting parameters from the data alone.

    rabi: a3 from the peak of the zero-padded DFT of the uniformly resampled
    signal, a2 = span/2, then a1, a4 and a5 from a linear least-squares
    projection at that frequency. Fewer than 8 points fall back to
    a1 = 2·RMS, a3 = 2/span, a4 = 0, a5 = mean.

    t1/t2: a1 = y(0) − y(∞), y(∞) = tail mean (t1) or 0 (t2); a2 where the
    normalized decay crosses 1/e; t1 a3 = tail mean, t2 a3 = 1.
    """
    model = FitModel.of(model)
    if model.kind is ModelKind.RABI:
        return _rabi_init(data)
    return _decay_init(model, data)


def pi_time(result):
    """
    π-pulse duration 1/(2·a3) of a converged Rabi fit.

    The difference to the phase-aware first minimum (π − a4)/(2π·a3) is logged.
    """
    if ModelKind(result.model) is not ModelKind.RABI:
        raise DomainError(f"pi_time needs a rabi fit, got {ModelKind(result.model).value}")
    if not result.converged:
        raise NumericalError("pi_time needs a converged rabi fit", {"iterations": result.iterations})
    a3, a4 = float(result.params[2]), float(result.params[3])
    if not a3 > 0:
        raise DomainError(f"Rabi frequency must be > 0, got {a3!r}")
    duration = 1.0 / (2.0 * a3)

    first_minimum = (math.pi - a4) / (2.0 * math.pi * a3)
    relative = abs(first_minimum - duration) / duration
    if relative > 0.1:
        logger.warning(
            f"pi time {duration:.6g} s differs from the first signal minimum {first_minimum:.6g} s "
            f"by {relative:.1%} (phase a4={a4:.3f} rad)"
        )
    else:
        logger.debug(f"pi time {duration:.6g} s, first signal minimum {first_minimum:.6g} s")
    return duration


def pi_half_time(result):
    return pi_time(result) / 2.0


def read_time_series(path):
    """Read a CSV with header tau_s,signal[,sigma]."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("time series not found", path=path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read time series: {e}", path=path) from e
    columns = list(frame.columns)
    if columns not in (["tau_s", "signal"], ["tau_s", "signal", "sigma"]):
        raise ConfigError(f"header must be tau_s,signal[,sigma], got {','.join(map(str, columns))}", path=path)
    try:
        frame = frame.astype(float)
        sigma = frame["sigma"].to_numpy() if "sigma" in frame else None
        return TimeSeries(frame["tau_s"].to_numpy(), frame["signal"].to_numpy(), sigma)
    except (ValueError, DomainError) as e:
        raise ConfigError(str(e), path=path) from e


def write_time_series(path, series):
    frame = pd.DataFrame({"tau_s": series.tau, "signal": series.signal})
    if series.sigma is not None:
        frame["sigma"] = series.sigma
    return atomic_write_frame(frame, path)


def write_fit_result(path, result):
    return atomic_write_text(path, result.to_json() + "\n")

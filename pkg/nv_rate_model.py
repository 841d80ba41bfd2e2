"""
Five-level rate-equation model of the negatively charged NV center.

Levels: 1 = ground m_s=0, 2 = ground m_s=±1, 3 = excited m_s=0,
4 = excited m_s=±1, 5 = metastable singlet. k_ij is the rate from level i
to level j in Hz. Optical pumping drives 1→3 and 2→4 at the same rate
Γ = κ·s for average power density s.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from util import (
    ConfigError,
    DegenerateSteadyStateError,
    DomainError,
    NumericalError,
    line_of_key,
    load_key_values,
)

logger = logging.getLogger(__name__)

RATE_KEYS = ("k31", "k32", "k35", "k41", "k42", "k45", "k51", "k52")
RELAXATION_KEYS = ("k12", "k21")
MHZ = 1e6


@dataclass(frozen=True)
class NvRateSet:
    """Transition rates k_ij [Hz]. k12/k21 are ground-state spin relaxation."""

    k31: float
    k32: float
    k35: float
    k41: float
    k42: float
    k45: float
    k51: float
    k52: float
    k12: float = 0.0
    k21: float = 0.0

    def __post_init__(self):
        for name in RATE_KEYS + RELAXATION_KEYS:
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise DomainError(f"rate {name} must be finite and >= 0, got {value!r}")
        if self.excited0_decay <= 0:
            raise DomainError("level 3 has no decay channel (k31 + k32 + k35 = 0)")
        if self.excited1_decay <= 0:
            raise DomainError("level 4 has no decay channel (k41 + k42 + k45 = 0)")
        if self.singlet_decay <= 0:
            raise DomainError("level 5 has no decay channel (k51 + k52 = 0)")

    @property
    def excited0_decay(self):
        return self.k31 + self.k32 + self.k35

    @property
    def excited1_decay(self):
        return self.k41 + self.k42 + self.k45

    @property
    def singlet_decay(self):
        return self.k51 + self.k52

    def is_spin_symmetric(self):
        """True when swapping the two spin branches leaves the model unchanged."""
        return (
            self.k31 == self.k42
            and self.k32 == self.k41
            and self.k35 == self.k45
            and self.k51 == self.k52
            and self.k12 == self.k21
        )

    def scaled(self, factor):
        return NvRateSet(**{name: getattr(self, name) * factor for name in RATE_KEYS + RELAXATION_KEYS})

    def as_dict(self):
        return {name: getattr(self, name) for name in RATE_KEYS + RELAXATION_KEYS}


@dataclass(frozen=True)
class PumpModel:
    """Linear optical pump: Γ = coupling · power density, same Γ on both spin branches."""

    coupling: float
    spin_conserving: bool = True

    def __post_init__(self):
        if not (self.coupling > 0 and math.isfinite(self.coupling)):
            raise DomainError(f"pump coupling must be > 0, got {self.coupling!r}")
        if not self.spin_conserving:
            raise DomainError("only spin-conserving optical pumping is modelled")


@dataclass(frozen=True)
class SteadyState:
    """Steady-state populations ρ_ii of the five levels."""

    rho11: float
    rho22: float
    rho33: float
    rho44: float
    rho55: float
    pump_rate: float = float("nan")
    condition_number: float = float("nan")
    diagnostics: dict = field(default_factory=dict, compare=False, repr=False)

    def as_array(self):
        return np.array([self.rho11, self.rho22, self.rho33, self.rho44, self.rho55])


def pump_rate(pump, power_density):
    return pump.coupling * power_density


def rate_matrix(rates, pump, power_density):
    """
    Generator M of dρ/dt = M ρ for the five populations.

    Columns sum to zero, so population is conserved.
    """
    gamma = pump_rate(pump, power_density)
    r = rates
    return np.array(
        [
            [-gamma - r.k12, r.k21, r.k31, r.k41, r.k51],
            [r.k12, -gamma - r.k21, r.k32, r.k42, r.k52],
            [gamma, 0.0, -r.excited0_decay, 0.0, 0.0],
            [0.0, gamma, 0.0, -r.excited1_decay, 0.0],
            [0.0, 0.0, r.k35, r.k45, -r.singlet_decay],
        ]
    )


def steady_state(rates, pump, power_density):
    """
    Solve M ρ = 0 with Σρ = 1.

    The first (redundant) balance row is replaced by the normalization row,
    the balance rows are divided by the largest rate so every row is O(1),
    and the dense 5×5 system is solved with partial pivoting.

    Args:
        rates (NvRateSet): Transition rates.
        pump (PumpModel): Pump coupling κ.
        power_density (float): Average power density s [W/m²], > 0.

    Returns:
        SteadyState
    """
    if not power_density > 0:
        raise DegenerateSteadyStateError(
            f"power density must be > 0 for a unique steady state, got {power_density!r}"
        )
    system = rate_matrix(rates, pump, power_density)
    system /= np.max(np.abs(system))
    system[0, :] = 1.0
    rhs = np.zeros(5)
    rhs[0] = 1.0

    condition_number = float(np.linalg.cond(system))
    diagnostics = {
        "condition_number": condition_number,
        "pump_rate": pump_rate(pump, power_density),
        "rates": rates.as_dict(),
    }
    try:
        rho = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"steady-state system is singular: {e}", diagnostics) from e
    if not np.all(np.isfinite(rho)):
        raise NumericalError("steady-state solution is not finite", diagnostics)
    if condition_number > 1e14:
        logger.warning(f"Steady-state system is ill-conditioned (cond={condition_number:.3g})")

    return SteadyState(
        *(float(value) for value in rho),
        pump_rate=diagnostics["pump_rate"],
        condition_number=condition_number,
        diagnostics=diagnostics,
    )


def cw_fluorescence(ss, rates):
    """
    Steady-state fluorescence per center,
    I_CW = (k31+k32)/(k31+k32+k35)·ρ33 + (k41+k42)/(k41+k42+k45)·ρ44.
    """
    if rates.excited0_decay <= 0 or rates.excited1_decay <= 0:
        raise DomainError("excited-state total decay rate is zero")
    branch3 = (rates.k31 + rates.k32) / rates.excited0_decay
    branch4 = (rates.k41 + rates.k42) / rates.excited1_decay
    return branch3 * ss.rho33 + branch4 * ss.rho44


def polarization(ss):
    """Ground-state spin polarization P = (ρ11 − ρ22)/(ρ11 + ρ22)."""
    ground = ss.rho11 + ss.rho22
    if not ground > 0:
        raise DomainError("ground-state population is zero; polarization undefined")
    return (ss.rho11 - ss.rho22) / ground


def evolve(rates, pump, power_density, rho0, times):
    """
    Populations at each of `times` starting from `rho0` at t = 0.

    Propagates exactly with the matrix exponential of the (time-independent)
    generator.

    Returns:
        numpy.ndarray: Shape (len(times), 5).
    """
    if not power_density >= 0:
        raise DomainError(f"power density must be >= 0, got {power_density!r}")
    rho0 = np.asarray(rho0, dtype=float)
    if rho0.shape != (5,):
        raise DomainError("initial populations must have five entries")
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(times < 0):
        raise DomainError("evolution times must be >= 0")
    generator = rate_matrix(rates, pump, power_density)
    return np.array([expm(generator * t) @ rho0 for t in times])


def slowest_rate(rates, pump, power_density):
    """Magnitude of the slowest non-zero relaxation rate of the generator."""
    eigenvalues = np.linalg.eigvals(rate_matrix(rates, pump, power_density))
    magnitudes = np.sort(np.abs(eigenvalues.real))
    scale = magnitudes[-1]
    nonzero = magnitudes[magnitudes > 1e-12 * scale]
    if nonzero.size == 0:
        raise NumericalError("generator has no decaying mode")
    return float(nonzero[0])


def readout_fluorescence(rates, pump, power_density, rho0, duration, points=201):
    """
    Time-resolved fluorescence during a readout laser pulse.

    Returns:
        tuple: (times [s], I(t) per center, integral of I over the pulse [s]).
    """
    if not duration > 0:
        raise DomainError(f"readout duration must be > 0, got {duration!r}")
    times = np.linspace(0.0, duration, points)
    populations = evolve(rates, pump, power_density, rho0, times)
    branch3 = (rates.k31 + rates.k32) / rates.excited0_decay
    branch4 = (rates.k41 + rates.k42) / rates.excited1_decay
    signal = branch3 * populations[:, 2] + branch4 * populations[:, 3]
    return times, signal, float(np.trapezoid(signal, times))


def readout_contrast(rates, pump, power_density, duration, points=201):
    """Relative photon-count difference between starting in |1⟩ and in |2⟩."""
    bright = readout_fluorescence(rates, pump, power_density, [1, 0, 0, 0, 0], duration, points)[2]
    dark = readout_fluorescence(rates, pump, power_density, [0, 1, 0, 0, 0], duration, points)[2]
    return (bright - dark) / bright


def load_rate_set(path):
    """
    Read a rate-set file (k31…k52 in MHz, kappa in Hz per W/m², optional k12/k21 in MHz).

    Returns:
        tuple: (NvRateSet, PumpModel)
    """
    path = Path(path)
    values = load_key_values(path)
    known = set(RATE_KEYS) | set(RELAXATION_KEYS) | {"kappa", "source"}
    for key in values:
        if key not in known:
            logger.warning(f"Ignoring unknown key '{key}' in rate file {path}")
    logger.info(f"Rate set {path.name}: {values.get('source') or 'source not stated'}")

    def number(key, default=None):
        raw = values.get(key)
        if raw is None or raw == "":
            if default is not None:
                return default
            raise ConfigError("missing required rate", path=path, key=key, line=line_of_key(path, key))
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"not a number: '{raw}'", path=path, key=key, line=line_of_key(path, key)) from e

    try:
        rates = NvRateSet(
            **{key: number(key) * MHZ for key in RATE_KEYS},
            **{key: number(key, 0.0) * MHZ for key in RELAXATION_KEYS},
        )
        pump = PumpModel(coupling=number("kappa"))
    except DomainError as e:
        raise ConfigError(str(e), path=path) from e
    logger.info(f"Rate set loaded from {path}: {rates}")
    return rates, pump


def with_pump_coupling(pump, coupling):
    return replace(pump, coupling=coupling)

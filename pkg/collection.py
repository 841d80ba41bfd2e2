"""
Collection side of the microscope: numerical aperture, solid-angle detection
rate, fiber-core detection proportion and the detected-signal figure of merit.
"""
import logging
import math
from dataclasses import asdict, dataclass

import nv_rate_model
from util import DomainError

logger = logging.getLogger(__name__)


def numerical_aperture(lens_radius, focal_length):
    """NA = sin(arctan(lens_radius / F)) of a lens collecting from its focus."""
    if not lens_radius > 0:
        raise DomainError(f"lens radius must be > 0, got {lens_radius!r}")
    if not focal_length > 0:
        raise DomainError(f"focal length must be > 0, got {focal_length!r}")
    return math.sin(math.atan2(lens_radius, focal_length))


def collection_half_angle(na):
    _check_na(na)
    return math.asin(na)


def _check_na(na):
    if not 0 < na <= 1:
        raise DomainError(f"numerical aperture must lie in (0, 1], got {na!r}")


def detection_rate(na):
    """
    Fraction of isotropic emission collected, relative to NA = 1.

    The one-sided cone collects (1 − cos θ)/2 of 4π; dividing by the NA = 1
    value of 1/2 leaves 1 − sqrt(1 − NA²).
    """
    _check_na(na)
    # 1 - sqrt(1 - x) written to avoid cancellation at small NA
    na2 = na * na
    return na2 / (1.0 + math.sqrt(1.0 - na2))


def detection_proportion(core_radius, magnification, w0):
    """
    Share of the excited spot's image that fits through the fiber core (pinhole).

    Returns min(1, (core_radius / (magnification · w0))²).
    """
    for name, value in (("core radius", core_radius), ("magnification", magnification), ("waist radius", w0)):
        if not value > 0:
            raise DomainError(f"{name} must be > 0, got {value!r}")
    return min(1.0, (core_radius / (magnification * w0)) ** 2)


@dataclass(frozen=True)
class CollectionGeometry:
    lens_radius: float
    focal_length: float
    numerical_aperture: float
    detection_rate: float

    def __post_init__(self):
        expected = numerical_aperture(self.lens_radius, self.focal_length)
        if abs(expected - self.numerical_aperture) > 1e-12:
            raise DomainError("numerical aperture does not match the lens geometry")
        _check_na(self.numerical_aperture)
        if not 0 < self.detection_rate <= 1:
            raise DomainError(f"detection rate must lie in (0, 1], got {self.detection_rate!r}")


def collection_from_lens(lens_radius, focal_length):
    na = numerical_aperture(lens_radius, focal_length)
    return CollectionGeometry(lens_radius, focal_length, na, detection_rate(na))


@dataclass(frozen=True)
class FigureOfMerit:
    """Factors of the detected signal and their product."""

    detection_volume: float
    i_cw: float
    polarization: float
    detection_rate: float
    detection_proportion: float
    density: float
    detected_signal: float

    @property
    def product(self):
        """Volume · I_CW · P, the polarized fluorescence before collection."""
        return self.detection_volume * self.i_cw * self.polarization

    def to_dict(self):
        data = asdict(self)
        data["product"] = self.product
        return data


def detected_signal(detection_volume, i_cw, polarization, detection_rate, detection_proportion, density=1.0):
    return detection_volume * i_cw * polarization * detection_rate * detection_proportion * density


def figure_of_merit(beam, region, rates, pump, coll, proportion=1.0, density=1.0):
    """
    Detected signal of one design point.

    I_CW and P are evaluated at the region's mean power density; the result
    is the product of volume, I_CW, P, detection rate, detection proportion
    and center density.

    Args:
        beam (BeamGeometry | None): Excitation beam; when given its waist must
            match the region's.
        region (ExcitationRegion): Excited cylinder.
        rates (NvRateSet): Transition rates.
        pump (PumpModel): Pump coupling.
        coll (CollectionGeometry | float): Lens geometry, or a bare detection
            rate in (0, 1] for model-sensitivity runs.
        proportion (float): Detection proportion in (0, 1].
        density (float): Center density (arbitrary units), ≥ 0.

    Returns:
        FigureOfMerit
    """
    if beam is not None and abs(beam.waist_radius - region.waist_radius) > 1e-9 * region.waist_radius:
        raise DomainError("beam and excitation region disagree on the waist radius")
    if not 0 < proportion <= 1:
        raise DomainError(f"detection proportion must lie in (0, 1], got {proportion!r}")
    if not density >= 0:
        raise DomainError(f"density must be >= 0, got {density!r}")

    rate = coll.detection_rate if isinstance(coll, CollectionGeometry) else float(coll)
    if not 0 < rate <= 1:
        raise DomainError(f"detection rate must lie in (0, 1], got {rate!r}")

    ss = nv_rate_model.steady_state(rates, pump, region.mean_power_density)
    i_cw = nv_rate_model.cw_fluorescence(ss, rates)
    p = nv_rate_model.polarization(ss)
    return FigureOfMerit(
        detection_volume=region.volume,
        i_cw=i_cw,
        polarization=p,
        detection_rate=rate,
        detection_proportion=proportion,
        density=density,
        detected_signal=detected_signal(region.volume, i_cw, p, rate, proportion, density),
    )

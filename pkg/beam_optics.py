"""
Gaussian-beam geometry of the excitation laser.

All lengths are in meters and powers in watts.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum

from util import DomainError

logger = logging.getLogger(__name__)


class VolumeModel(str, Enum):
    """How long the excitation cylinder is taken to be."""

    CLIPPED = "clipped"  # min(2 z_R, t)
    THICKNESS = "thickness"  # t


def _require_positive(name, value):
    if not value > 0 or math.isnan(value):
        raise DomainError(f"{name} must be > 0, got {value!r}")


def rayleigh_length(w0, wavelength):
    """
    Rayleigh length z_R = π w0² / λ.

    Args:
        w0 (float): Waist radius [m], ≥ 0.
        wavelength (float): Laser wavelength [m], > 0.

    Returns:
        float: z_R [m].
    """
    _require_positive("wavelength", wavelength)
    if not w0 >= 0:
        raise DomainError(f"waist radius must be >= 0, got {w0!r}")
    return math.pi * w0 * w0 / wavelength


def waist_for_rayleigh(zr, wavelength):
    """Waist radius that gives Rayleigh length `zr`."""
    _require_positive("wavelength", wavelength)
    if not zr >= 0:
        raise DomainError(f"Rayleigh length must be >= 0, got {zr!r}")
    return math.sqrt(zr * wavelength / math.pi)


def focal_length_for_rayleigh(zr, beam_diameter, wavelength):
    """
    Focal length that focuses a collimated beam of diameter D to Rayleigh length z_R.

    F = (D/2) · sqrt(z_R π / λ)
    """
    _require_positive("Rayleigh length", zr)
    _require_positive("incident beam diameter", beam_diameter)
    _require_positive("wavelength", wavelength)
    return 0.5 * beam_diameter * math.sqrt(zr * math.pi / wavelength)


def waist_from_lens(focal_length, beam_diameter, wavelength):
    """Waist radius w0 = 2 λ F / (π D) behind a lens of focal length F."""
    _require_positive("focal length", focal_length)
    _require_positive("incident beam diameter", beam_diameter)
    _require_positive("wavelength", wavelength)
    return 2.0 * wavelength * focal_length / (math.pi * beam_diameter)


def focal_length_for_waist(w0, beam_diameter, wavelength):
    """Focal length F = π D w0 / (2 λ) that focuses a beam of diameter D to waist w0."""
    _require_positive("waist radius", w0)
    _require_positive("incident beam diameter", beam_diameter)
    _require_positive("wavelength", wavelength)
    return w0 * math.pi * beam_diameter / (2.0 * wavelength)


def beam_radius(w0, z, wavelength):
    """Beam radius w(z) = w0 · sqrt(1 + (z/z_R)²) at distance z from the waist."""
    _require_positive("waist radius", w0)
    zr = rayleigh_length(w0, wavelength)
    return w0 * math.sqrt(1.0 + (z / zr) ** 2)


@dataclass(frozen=True)
class BeamGeometry:
    """A focused excitation beam, described both by waist and by lens."""

    wavelength: float
    waist_radius: float
    incident_beam_diameter: float
    focal_length: float

    def __post_init__(self):
        for name in ("wavelength", "waist_radius", "incident_beam_diameter", "focal_length"):
            _require_positive(name, getattr(self, name))
        implied = waist_from_lens(self.focal_length, self.incident_beam_diameter, self.wavelength)
        if abs(implied - self.waist_radius) > 1e-12 * self.waist_radius:
            raise DomainError(
                f"waist radius {self.waist_radius!r} does not match the lens "
                f"(F={self.focal_length!r}, D={self.incident_beam_diameter!r} gives {implied!r})"
            )

    @classmethod
    def from_lens(cls, focal_length, beam_diameter, wavelength):
        w0 = waist_from_lens(focal_length, beam_diameter, wavelength)
        return cls(wavelength, w0, beam_diameter, focal_length)

    @classmethod
    def from_rayleigh(cls, zr, beam_diameter, wavelength):
        focal_length = focal_length_for_rayleigh(zr, beam_diameter, wavelength)
        return cls.from_lens(focal_length, beam_diameter, wavelength)

    @property
    def rayleigh_length(self):
        return rayleigh_length(self.waist_radius, self.wavelength)

    @property
    def spot_diameter(self):
        return 2.0 * self.waist_radius


@dataclass(frozen=True)
class ExcitationRegion:
    """Cylinder of radius w0 that the laser excites inside the sample."""

    waist_radius: float
    sample_thickness: float
    effective_length: float
    volume: float
    mean_power_density: float
    laser_power: float
    model: VolumeModel = VolumeModel.CLIPPED


def excitation_region(w0, sample_thickness, laser_power, wavelength,
                      model=VolumeModel.CLIPPED, refractive_index=1.0):
    """
    Build the cylindrical excitation region for a beam focused into a slab.

    Args:
        w0 (float): Waist radius [m].
        sample_thickness (float): Slab thickness t [m]; math.inf allowed for
            the clipped model.
        laser_power (float): Total power P0 [W], ≥ 0.
        wavelength (float): Laser wavelength [m].
        model (VolumeModel | str): "clipped" → length min(2 z_R, t);
            "thickness" → length t.
        refractive_index (float): Multiplies z_R inside the sample. 1 disables
            the correction.

    Returns:
        ExcitationRegion
    """
    model = VolumeModel(model)
    _require_positive("waist radius", w0)
    _require_positive("sample thickness", sample_thickness)
    _require_positive("refractive index", refractive_index)
    if not laser_power >= 0:
        raise DomainError(f"laser power must be >= 0, got {laser_power!r}")

    zr = refractive_index * rayleigh_length(w0, wavelength)
    if model is VolumeModel.CLIPPED:
        length = min(2.0 * zr, sample_thickness)
    else:
        if math.isinf(sample_thickness):
            raise DomainError("the thickness volume model needs a finite sample thickness")
        length = sample_thickness

    area = math.pi * w0 * w0
    return ExcitationRegion(
        waist_radius=w0,
        sample_thickness=sample_thickness,
        effective_length=length,
        volume=area * length,
        mean_power_density=laser_power / area,
        laser_power=laser_power,
        model=model,
    )

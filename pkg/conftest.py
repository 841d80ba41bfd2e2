import logging
from pathlib import Path

import pytest

import designer
import nv_rate_model
from designer import SweepSpec, SweepVariable

RESOURCES = Path(__file__).parent / "resources"

WAVELENGTH = 532e-9
BEAM_DIAMETER = 0.9e-3
POWER = 10e-3
THICKNESS = 500e-6
LENS_RADIUS = 12.7e-3


@pytest.fixture(autouse=True)
def restore_root_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in list(root.handlers):
        if handler not in handlers:
            root.removeHandler(handler)
            handler.close()
    for handler in handlers:
        if handler not in root.handlers:
            root.addHandler(handler)
    root.setLevel(level)


@pytest.fixture(scope="session")
def shipped_rates():
    return nv_rate_model.load_rate_set(RESOURCES / "nv_rates.env")


@pytest.fixture(scope="session")
def reference_spec(shipped_rates):
    rates, pump = shipped_rates
    return SweepSpec(
        variable=SweepVariable.RAYLEIGH_LENGTH,
        grid=SweepSpec.default_grid(),
        laser_power=POWER,
        wavelength=WAVELENGTH,
        beam_diameter=BEAM_DIAMETER,
        sample_thickness=THICKNESS,
        lens_radius=LENS_RADIUS,
        rates=rates,
        pump=pump,
    )


@pytest.fixture(scope="session")
def reference_optimum(reference_spec):
    return designer.optimal_rayleigh(reference_spec)

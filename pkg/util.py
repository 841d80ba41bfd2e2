import logging
import os
import re
import sys
import tempfile
from decimal import Decimal
from pathlib import Path

from dotenv import dotenv_values


class LrcfmError(Exception):
    """Base class for every error raised by the toolkit."""


class DomainError(LrcfmError, ValueError):
    """An argument lies outside the domain of the operation."""


class DegenerateSteadyStateError(DomainError):
    """Steady state is undetermined (no optical pumping)."""


class UnidentifiableError(DomainError):
    """The data carry no information about the fit parameters."""


class ConfigError(LrcfmError):
    """A config, rate-set or input file could not be used."""

    def __init__(self, message, path=None, key=None, line=None):
        self.path = path
        self.key = key
        self.line = line
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"field '{key}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class NumericalError(LrcfmError):
    """A numerical procedure failed; `diagnostics` tells why."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class SweepError(NumericalError):
    """A sweep grid point could not be evaluated."""

    def __init__(self, message, index, value, diagnostics=None):
        self.index = index
        self.value = value
        super().__init__(f"grid point {index} (value={value!r}): {message}", diagnostics)


class MappingError(LrcfmError):
    """Pixel records do not form a usable map."""


class NoValidPixelsError(MappingError):
    def __init__(self, message="no valid pixels"):
        super().__init__(message)


LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def setup_logging(verbosity=0, log_file=None):
    """
    Configure the root logger once for command-line use.

    Args:
        verbosity (int): 0 → WARNING, 1 → INFO, 2+ → DEBUG on stderr.
        log_file (str | Path | None): Optional file that receives DEBUG and up.
    """
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG

    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.setLevel(logging.DEBUG if log_file else level)

    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(console)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(file_handler)


def log_uncaught_exceptions(ex_cls, ex, tb):
    logging.critical("Uncaught exception", exc_info=(ex_cls, ex, tb))


# Decimal exponent and dimension per unit suffix
UNITS = {
    "nm": (-9, "length"),
    "um": (-6, "length"),
    "μm": (-6, "length"),
    "µm": (-6, "length"),
    "mm": (-3, "length"),
    "cm": (-2, "length"),
    "m": (0, "length"),
    "uW": (-6, "power"),
    "μW": (-6, "power"),
    "mW": (-3, "power"),
    "W": (0, "power"),
    "ns": (-9, "time"),
    "us": (-6, "time"),
    "μs": (-6, "time"),
    "ms": (-3, "time"),
    "s": (0, "time"),
}

_QUANTITY_RE = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?inf)\s*([^\s\d.+-][^\s]*)?\s*$")


def parse_quantity(text, dimension=None):
    """
    Convert a unit-suffixed quantity such as "10 mW" or "532nm" to SI.

    Args:
        text (str): The quantity. A bare number is accepted only when
            `dimension` is None (dimensionless).
        dimension (str | None): "length", "power", "time" or None.

    Returns:
        float: The value in SI units.
    """
    match = _QUANTITY_RE.match(str(text))
    if not match:
        raise ValueError(f"cannot parse quantity '{text}'")
    number, unit = match.groups()
    value = float(number)
    if unit is None:
        if dimension is not None:
            raise ValueError(f"'{text}' needs a {dimension} unit suffix")
        return value
    if unit not in UNITS:
        raise ValueError(f"unknown unit '{unit}' in '{text}'")
    exponent, unit_dimension = UNITS[unit]
    if dimension is None or unit_dimension != dimension:
        raise ValueError(f"'{text}' is a {unit_dimension}, expected {dimension or 'a plain number'}")
    # scale in decimal so "100 ns" is exactly the literal 100e-9
    return float(Decimal(number).scaleb(exponent))


def line_of_key(path, key):
    """Return the 1-based line number where `key` is assigned, or None."""
    pattern = re.compile(r"^\s*(?:export\s+)?" + re.escape(key) + r"\s*=")
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for number, line in enumerate(handle, start=1):
                if pattern.match(line):
                    return number
    except OSError:
        return None
    return None


def load_key_values(path):
    """
    Read a flat key = value file (dotenv syntax, dotted keys allowed).

    Args:
        path (str | Path): File to read.

    Returns:
        dict: Raw string values keyed by name; keys without a value are dropped.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError("file not found", path=path)
    values = dotenv_values(path, interpolate=False)
    logging.getLogger(__name__).debug(f"Loaded {len(values)} keys from {path}")
    return {key: value.strip() for key, value in values.items() if value is not None}


def require_quantity(values, key, dimension, path, default=None):
    """Fetch `key` from a loaded config as an SI float, raising ConfigError."""
    raw = values.get(key)
    if raw is None or raw == "":
        if default is not None:
            return default
        raise ConfigError("missing required value", path=path, key=key, line=line_of_key(path, key))
    try:
        return parse_quantity(raw, dimension)
    except ValueError as e:
        raise ConfigError(str(e), path=path, key=key, line=line_of_key(path, key)) from e


def atomic_write_text(path, text):
    """Write `text` to `path` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(temp_path, path)
    except Exception:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise
    return path


def atomic_write_frame(frame, path):
    """Write a pandas DataFrame as CSV atomically, floats at round-trip precision."""
    return atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))

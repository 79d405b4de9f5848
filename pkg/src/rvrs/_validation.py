"""Small input-checking helpers shared across modules."""

import numbers

import numpy as np

from .errors import DimensionError, ShapeError


def as_float_array(x, name="x"):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_latent(z, dim, name="z"):
    """Return ``z`` as a float array whose trailing axis has length ``dim``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0 or z.shape[-1] != dim:
        got = z.shape[-1] if z.ndim else "scalar"
        raise DimensionError(f"{name} has trailing dimension {got}, expected {dim}")
    return z


def check_same_shape(a, b, what="gradient"):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"{what} shape {b.shape} does not match parameters {a.shape}")


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_open_unit(value, name):
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value

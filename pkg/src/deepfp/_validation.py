"""Small input-validation helpers in the spirit of ``sklearn.utils.validation``."""
import numpy as np

from .exceptions import DomainError, NumericError, ShapeError


def as_float_array(x, name="array", ndim_min=0):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim < ndim_min:
        raise ShapeError(f"{name} must have at least {ndim_min} dimensions, got shape {arr.shape}")
    return arr


def check_last_dims(arr, dims, name):
    """Check that the trailing dimensions of ``arr`` equal ``dims``."""
    dims = tuple(dims)
    if arr.ndim < len(dims) or tuple(arr.shape[arr.ndim - len(dims):]) != dims:
        raise ShapeError(f"{name} must end with dimensions {dims}, got shape {arr.shape}")
    return arr


def check_finite(arr, name):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values returned by {name}")
    return arr


def check_positive(value, name, strict=True):
    if strict and not value > 0:
        raise DomainError(f"{name} must be > 0, got {value}")
    if not strict and not value >= 0:
        raise DomainError(f"{name} must be >= 0, got {value}")
    return value


def check_player(game, i):
    if not (0 <= int(i) < game.N):
        raise ShapeError(f"player index {i} outside 0..{game.N - 1}")
    return int(i)

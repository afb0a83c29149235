"""Input validation helpers and error types shared across the package."""

import numpy as np

ROTATION_TOL = 1e-10
EDM_SYMMETRY_TOL = 1e-12


class SchemaError(ValueError):
    """A file or record does not match its documented schema."""


class ChainValidationError(ValueError):
    """A kinematic chain violates a structural invariant."""


class DegenerateGeometryError(RuntimeError):
    """Geometry does not determine the requested quantity (e.g. on-axis point)."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to converge within its iteration cap."""


def as_float_array(x, name="array", shape=None, finite=True):
    """Convert to a float64 ndarray, optionally enforcing shape and finiteness."""
    a = np.asarray(x, dtype=float)
    if shape is not None:
        expect = tuple(shape)
        actual = a.shape
        if len(expect) != len(actual) or any(
            e is not None and e != s for e, s in zip(expect, actual)
        ):
            raise ValueError(f"{name}: expected shape {expect}, got {actual}")
    if finite and not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: contains non-finite values")
    return a


def check_rotation(r, name="rotation", tol=ROTATION_TOL):
    """Validate a proper 3x3 rotation matrix (orthonormal, det +1)."""
    r = as_float_array(r, name, shape=(3, 3))
    err = np.abs(r.T @ r - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"{name}: not orthonormal (|R^T R - I| = {err:.2e})")
    if np.linalg.det(r) < 0:
        raise ValueError(f"{name}: improper rotation (det < 0)")
    return r


def check_edm(d, name="edm", tol=EDM_SYMMETRY_TOL):
    """Validate a squared Euclidean distance matrix: square, symmetric, zero
    diagonal and nonnegative entries."""
    d = as_float_array(d, name)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"{name}: expected a square matrix, got shape {d.shape}")
    scale = max(1.0, float(np.abs(d).max()) if d.size else 1.0)
    if np.abs(d - d.T).max() > tol * scale:
        raise ValueError(f"{name}: not symmetric within {tol}")
    if np.abs(np.diag(d)).max() > tol * scale:
        raise ValueError(f"{name}: nonzero diagonal")
    if d.min() < -tol * scale:
        raise ValueError(f"{name}: negative entries")
    return d


def packed_size(n_points):
    """Length of the strict upper triangle of an n_points x n_points matrix."""
    return n_points * (n_points - 1) // 2


def points_from_packed_size(length, name="packed vector"):
    """Recover the matrix side length from a packed strict-upper-triangle length."""
    n = int(round((1 + np.sqrt(1 + 8 * length)) / 2))
    if packed_size(n) != length:
        raise ValueError(f"{name}: length {length} is not a triangular number")
    return n

"""Input validation helpers shared by the public API."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError

UNIT_TOL = 1e-9


def as_points(x, name="points") -> np.ndarray:
    """Return ``x`` as a float array of shape (n, 3)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {np.shape(x)}")
    return arr


def check_vector3(x, name="vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def check_unit_vectors(d, name="direction", tol=UNIT_TOL) -> np.ndarray:
    arr = as_points(d, name)
    norms = np.linalg.norm(arr, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"{name} must be unit length (|norm - 1| = {worst:.3g})")
    return arr


def check_latent(latent, latent_dim: int) -> np.ndarray:
    """Validate a latent code against a field's declared dimension."""
    if latent is None:
        latent = np.zeros(0)
    z = np.asarray(latent, dtype=np.float64).reshape(-1)
    if z.shape[0] != latent_dim:
        raise ConfigurationError(f"latent has dimension {z.shape[0]}, field expects {latent_dim}")
    return z


def check_positive_int(value, name, minimum=1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_bounds(t_near, t_far) -> tuple[float, float]:
    t_near, t_far = float(t_near), float(t_far)
    if not (np.isfinite(t_near) and np.isfinite(t_far)) or not t_near < t_far:
        raise ValueError(f"need t_near < t_far, got [{t_near}, {t_far}]")
    return t_near, t_far


def check_images(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b

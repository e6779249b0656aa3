"""Cameras, rays and depth samplers, including the shrinking window."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from ._validation import check_bounds, check_positive_int, check_unit_vectors, check_vector3


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", check_vector3(self.origin, "origin"))
        object.__setattr__(self, "direction", check_unit_vectors(self.direction)[0])
        t_near, t_far = check_bounds(self.t_near, self.t_far)
        object.__setattr__(self, "t_near", t_near)
        object.__setattr__(self, "t_far", t_far)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class RayBatch:
    """Rays sharing depth bounds, stored as (n, 3) arrays."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: float
    t_far: float

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, i) -> Ray:
        return Ray(self.origins[i], self.directions[i], self.t_near, self.t_far)

    def subset(self, index) -> "RayBatch":
        return RayBatch(self.origins[index], self.directions[index], self.t_near, self.t_far)

    @classmethod
    def from_rays(cls, rays) -> "RayBatch":
        rays = list(rays)
        return cls(
            np.stack([r.origin for r in rays]),
            np.stack([r.direction for r in rays]),
            rays[0].t_near,
            rays[0].t_far,
        )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``fov_deg`` is the vertical field of view."""

    position: np.ndarray
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    fov_deg: float = 12.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        for name in ("position", "right", "up", "forward"):
            object.__setattr__(self, name, check_vector3(getattr(self, name), name))
        frame = np.stack([self.right, self.up, self.forward])
        if np.max(np.abs(frame @ frame.T - np.eye(3))) > 1e-9:
            raise ValueError("camera right/up/forward must be orthonormal")
        check_positive_int(self.width, "width")
        check_positive_int(self.height, "height")

    @classmethod
    def looking_at(cls, position, target=(0.0, 0.0, 0.0), fov_deg=12.0, width=64, height=64,
                   world_up=(0.0, 1.0, 0.0)) -> "Camera":
        position = check_vector3(position, "position")
        forward = check_vector3(target, "target") - position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, world_up)
        right = right / np.linalg.norm(right)
        up = np.cross(right, forward)
        return cls(position, right, up, forward, fov_deg, width, height)

    def pose_array(self) -> np.ndarray:
        """(4, 3) stack of position, right, up, forward."""
        return np.stack([self.position, self.right, self.up, self.forward])

    @classmethod
    def from_pose_array(cls, pose, fov_deg=12.0, width=64, height=64) -> "Camera":
        pose = np.asarray(pose, dtype=np.float64).reshape(4, 3)
        return cls(pose[0], pose[1], pose[2], pose[3], fov_deg, width, height)


def generate_rays(camera: Camera, t_near: float = 0.88, t_far: float = 1.12) -> RayBatch:
    """One ray per pixel centre, row-major from the top-left pixel."""
    t_near, t_far = check_bounds(t_near, t_far)
    w, h = camera.width, camera.height
    tan_half = np.tan(np.deg2rad(camera.fov_deg) / 2.0)
    aspect = w / h
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    u = (2.0 * (jj.reshape(-1) + 0.5) / w - 1.0) * tan_half * aspect
    v = (1.0 - 2.0 * (ii.reshape(-1) + 0.5) / h) * tan_half
    d = camera.forward + u[:, None] * camera.right + v[:, None] * camera.up
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, d.shape).copy()
    return RayBatch(origins, d, t_near, t_far)


@dataclass(frozen=True)
class PoseDistribution:
    """Yaw/pitch distribution on an orbit around ``look_at``.

    ``gaussian``: zero-mean normals with std ``sigma_h`` (yaw) and
    ``sigma_v`` (pitch).  ``uniform``: U[-sigma, sigma] per angle.
    """

    kind: str = "gaussian"
    sigma_v: float = 0.155
    sigma_h: float = 0.3
    radius: float = 1.0
    look_at: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown pose distribution {self.kind!r}")
        if self.sigma_v < 0 or self.sigma_h < 0:
            raise ValueError("pose spreads must be non-negative")


def sample_angles(dist: PoseDistribution, rng, size=None):
    """Draw (yaw, pitch) in radians."""
    if dist.kind == "gaussian":
        yaw = rng.normal(0.0, 1.0, size) * dist.sigma_h
        pitch = rng.normal(0.0, 1.0, size) * dist.sigma_v
    else:
        yaw = rng.uniform(-1.0, 1.0, size) * dist.sigma_h
        pitch = rng.uniform(-1.0, 1.0, size) * dist.sigma_v
    return yaw, pitch


def camera_from_angles(yaw, pitch, radius=1.0, look_at=(0.0, 0.0, 0.0), fov_deg=12.0, width=64, height=64):
    target = check_vector3(look_at, "look_at")
    offset = radius * np.array([np.cos(pitch) * np.sin(yaw), np.sin(pitch), np.cos(pitch) * np.cos(yaw)])
    return Camera.looking_at(target + offset, target, fov_deg, width, height)


def sample_pose(dist: PoseDistribution, rng, fov_deg=12.0, width=64, height=64) -> Camera:
    yaw, pitch = sample_angles(dist, rng)
    return camera_from_angles(yaw, pitch, dist.radius, dist.look_at, fov_deg, width, height)


@dataclass(frozen=True)
class ShrinkSchedule:
    """Sampling half-width ``max(delta_init * exp(-gamma * n), delta_min)``."""

    delta_init: float
    gamma: float
    delta_min: float
    step: int = dc_field(default=0)

    def __post_init__(self):
        if not self.delta_min > 0:
            raise ValueError("delta_min must be positive")
        if self.delta_init < self.delta_min:
            raise ValueError("delta_init must be >= delta_min")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    @classmethod
    def for_bounds(cls, t_near, t_far, gamma, delta_min) -> "ShrinkSchedule":
        t_near, t_far = check_bounds(t_near, t_far)
        return cls((t_far - t_near) / 2.0, gamma, delta_min)

    def delta(self, n=None) -> float:
        return schedule_delta(self, self.step if n is None else n)

    def advanced(self, steps=1) -> "ShrinkSchedule":
        return ShrinkSchedule(self.delta_init, self.gamma, self.delta_min, self.step + steps)


def schedule_delta(schedule: ShrinkSchedule, n) -> float:
    if n < 0:
        raise ValueError("step must be non-negative")
    return float(max(schedule.delta_init * np.exp(-schedule.gamma * n), schedule.delta_min))


# -- depth samplers ------------------------------------------------------------


def _bounds_of(ray):
    if isinstance(ray, (Ray, RayBatch)):
        return ray.t_near, ray.t_far
    return check_bounds(*ray)


def stratified_depths(lo, hi, u) -> np.ndarray:
    """``t_i = lo + (i + u_i) (hi - lo) / N`` with ``u`` of shape (..., N)."""
    u = np.asarray(u, dtype=np.float64)
    n = u.shape[-1]
    lo = np.asarray(lo, dtype=np.float64)[..., None]
    hi = np.asarray(hi, dtype=np.float64)[..., None]
    return lo + (np.arange(n) + u) * ((hi - lo) / n)


def stratified_samples(ray, n_samples: int, rng) -> np.ndarray:
    """One uniform draw in each of ``n_samples`` equal bins of the ray's bounds."""
    n_samples = check_positive_int(n_samples, "n_samples")
    t_near, t_far = _bounds_of(ray)
    return stratified_depths(t_near, t_far, rng.random(n_samples))


def shrink_windows(t_s, delta, t_near, t_far):
    """Window ``[t_s - delta, t_s + delta]`` translated back inside the bounds.

    Translation keeps the width at ``2 delta``.  A window wider than the
    volume collapses to the full ``[t_near, t_far]``.
    """
    t_s = np.asarray(t_s, dtype=np.float64)
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), t_s.shape)
    if np.any(delta <= 0):
        raise ValueError("delta must be positive")
    extent = t_far - t_near
    lo = t_s - delta
    hi = t_s + delta
    lo = np.where(lo < t_near, t_near, np.where(hi > t_far, t_far - 2.0 * delta, lo))
    hi = lo + 2.0 * delta
    full = 2.0 * delta >= extent * (1.0 - 1e-12)
    lo = np.where(full, t_near, lo)
    hi = np.where(full, t_far, hi)
    return lo, hi


def shrink_window_samples(ray, t_s: float, delta: float, n_samples: int, rng) -> np.ndarray:
    n_samples = check_positive_int(n_samples, "n_samples")
    t_near, t_far = _bounds_of(ray)
    lo, hi = shrink_windows(t_s, delta, t_near, t_far)
    return stratified_depths(lo, hi, rng.random(n_samples))


def hierarchical_fine_samples(coarse_depths, coarse_weights, n_fine: int, rng, t_near: float, t_far: float):
    """Inverse-transform draws from the piecewise-constant weight PDF.

    Bin ``i`` spans the midpoints around coarse depth ``i`` (the outer bins
    extend to the ray bounds) and carries mass proportional to weight ``i``.
    All-zero weights fall back to a uniform PDF over the bounds, which may be
    per-ray arrays (e.g. shrink windows).  Returns the
    coarse and fine depths merged and sorted along the last axis.
    """
    t = np.asarray(coarse_depths, dtype=np.float64)
    w = np.asarray(coarse_weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if n_fine == 0:
        return t.copy()
    lead = t.shape[:-1]
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), lead)[..., None]
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), lead)[..., None]
    edges = np.concatenate([t_near, 0.5 * (t[..., 1:] + t[..., :-1]), t_far], axis=-1)
    total = w.sum(axis=-1, keepdims=True)
    dead = total[..., 0] <= 0
    mass = np.where(total > 0, w / np.where(total > 0, total, 1.0), 0.0)
    cdf = np.concatenate([np.zeros(lead + (1,)), np.cumsum(mass, axis=-1)], axis=-1)
    cdf[..., -1] = 1.0
    u = rng.random(lead + (n_fine,))
    # bin index: the last edge whose cdf lies at or below u, skipping empty bins
    idx = np.sum(cdf[..., None, 1:-1] <= u[..., :, None], axis=-1)
    lo_c = np.take_along_axis(cdf, idx, axis=-1)
    hi_c = np.take_along_axis(cdf, idx + 1, axis=-1)
    lo_e = np.take_along_axis(edges, idx, axis=-1)
    hi_e = np.take_along_axis(edges, idx + 1, axis=-1)
    span = hi_c - lo_c
    frac = np.where(span > 0, (u - lo_c) / np.where(span > 0, span, 1.0), 0.5)
    fine = lo_e + np.clip(frac, 0.0, 1.0) * (hi_e - lo_e)
    fine = np.where(dead[..., None], t_near + u * (t_far - t_near), fine)
    return np.sort(np.concatenate([t, fine], axis=-1), axis=-1)


# -- reproducible random streams ----------------------------------------------------


def pixel_rng(seed: int, image: int, pixel: int, pass_: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, image, pixel, pass).

    Streams are independent of evaluation order, so parallel renders match
    serial ones draw for draw.
    """
    k0 = ((int(seed) & 0xFFFFFFFF) << 32) | (int(image) & 0xFFFFFFFF)
    k1 = ((int(pixel) & 0xFFFFFFFFFFFF) << 16) | (int(pass_) & 0xFFFF)
    return np.random.Generator(np.random.Philox(key=np.array([k0, k1], dtype=np.uint64)))


def pixel_uniforms(seed, image, pixels, pass_, n) -> np.ndarray:
    """Rows of ``n`` uniforms, row ``k`` drawn from ``pixel_rng(..., pixels[k], ...)``."""
    return np.stack([pixel_rng(seed, image, p, pass_).random(n) for p in pixels]) if len(pixels) else np.zeros((0, n))

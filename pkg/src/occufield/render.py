"""Density compositing, alpha compositing and surface-only rendering."""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._validation import check_latent, check_positive_int, check_vector3
from .exceptions import NumericError
from .field import DEGENERATE_GRADIENT, DensityField
from .rootfind import SurfaceHit, SurfaceHits, locate_surfaces
from .sampling import (
    Camera,
    Ray,
    RayBatch,
    ShrinkSchedule,
    generate_rays,
    hierarchical_fine_samples,
    pixel_uniforms,
    shrink_windows,
    stratified_depths,
)

ALPHA_CLAMP = 1e-7
MODES = ("density_cumulative", "alpha_cumulative", "surface_only")
MISS_POLICIES = ("background", "full_volume")
CHUNK_ROWS = 8


@dataclass(frozen=True)
class RenderConfig:
    """Per-ray rendering settings.

    ``miss_policy`` decides what windowed alpha compositing does on rays with
    no located surface: ``background`` paints the background colour without
    sampling, ``full_volume`` composites stratified samples over the whole
    ray (what training uses, so empty rays still receive gradients).
    """

    N: int = 12
    M: int = 12
    m_s: int = 3
    tau: float = 0.5
    mode: str = "alpha_cumulative"
    normalize_weights: bool = True
    background: tuple = (1.0, 1.0, 1.0)
    t_near: float = 0.88
    t_far: float = 1.12
    n_fine: int = 0
    miss_policy: str = "background"

    def __post_init__(self):
        check_positive_int(self.N, "N")
        check_positive_int(self.M, "M", minimum=2)
        if self.m_s < 0 or self.n_fine < 0:
            raise ValueError("m_s and n_fine must be >= 0")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.miss_policy not in MISS_POLICIES:
            raise ValueError(f"unknown miss policy {self.miss_policy!r}")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be < t_far")
        object.__setattr__(self, "background", tuple(float(c) for c in check_vector3(self.background)))

    @property
    def background_rgb(self) -> np.ndarray:
        return np.asarray(self.background, dtype=np.float64)


@dataclass
class RayRenderResult:
    color: np.ndarray
    weights: np.ndarray
    depths: np.ndarray
    hit: SurfaceHit | None = None
    queries_used: int = 0


# -- compositing -----------------------------------------------------------------


def sample_spacing(depths):
    """Distances to the next sample; the last one is the mean of the others.

    A single sample has no neighbour and gets spacing 0 here; callers with
    one sample pass the ray extent instead.
    """
    t = np.asarray(depths, dtype=np.float64)
    gaps = np.diff(t, axis=-1)
    if gaps.shape[-1] == 0:
        return np.zeros_like(t)
    return np.concatenate([gaps, gaps.mean(axis=-1, keepdims=True)], axis=-1)


def density_weights(sigmas, deltas):
    """``w_i = T_i (1 - exp(-sigma_i delta_i))``, ``T_i = exp(-sum_{j<i} sigma_j delta_j)``."""
    optical = sigmas * deltas
    return ad.exp(-ad.exclusive_cumsum(optical)) * (1.0 - ad.exp(-optical))


def alpha_weights(alphas, normalize=False, clamp=True):
    """``w_i = alpha_i prod_{j<i} (1 - alpha_j)`` along the last axis.

    With ``clamp`` the alphas are first limited to [1e-7, 1 - 1e-7].  With
    ``normalize`` the last weight becomes ``1 - sum_{j<N} w_j`` so the weights
    sum to one.  Works on arrays and on tape variables.
    """
    if clamp:
        alphas = ad.clip(alphas, ALPHA_CLAMP, 1.0 - ALPHA_CLAMP)
    weights = alphas * ad.exclusive_cumprod(1.0 - alphas)
    if normalize:
        n = np.shape(ad.value_of(weights))[-1]
        head = ad.take(weights, (Ellipsis, slice(0, n - 1)))
        last = 1.0 - ad.sum(head, axis=-1)
        weights = ad.concat([head, ad.reshape(last, np.shape(ad.value_of(last)) + (1,))], axis=-1)
    return weights


def composite(weights, colors, background=None):
    """``sum_i w_i c_i``, plus ``background * (1 - sum_i w_i)`` if given."""
    w3 = ad.reshape(weights, np.shape(ad.value_of(weights)) + (1,))
    color = ad.sum(w3 * colors, axis=-2)
    if background is not None:
        residual = 1.0 - ad.sum(weights, axis=-1)
        color = color + ad.reshape(residual, np.shape(ad.value_of(residual)) + (1,)) * background
    return color


# -- single-ray renderers -------------------------------------------------------------


def _ray_points(ray, depths):
    return ray.origin + np.asarray(depths)[:, None] * ray.direction


def render_density_cumulative(density_field, ray: Ray, depths, latent=None, background=(1.0, 1.0, 1.0)):
    """Classic radiance-field compositing of non-negative densities."""
    depths = np.asarray(depths, dtype=np.float64)
    pts = _ray_points(ray, depths)
    sigma = np.asarray(density_field.density(pts, latent), dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("density must be non-negative")
    deltas = sample_spacing(depths) if depths.size > 1 else np.array([ray.t_far - ray.t_near])
    dirs = np.broadcast_to(ray.direction, pts.shape)
    colors = density_field.color(pts, dirs, latent)
    w = density_weights(sigma, deltas)
    color = composite(w, colors, check_vector3(background))
    return RayRenderResult(color, w, depths, None, depths.size)


def render_alpha_cumulative(field, ray: Ray, latent, config: RenderConfig, depths):
    """Alpha compositing at caller-supplied sample depths."""
    depths = np.asarray(depths, dtype=np.float64)
    z = check_latent(latent, field.latent_dim)
    pts = _ray_points(ray, depths)
    alphas = field.alpha(pts, z)
    colors = field.color(pts, np.broadcast_to(ray.direction, pts.shape), z)
    w = alpha_weights(alphas, config.normalize_weights)
    background = None if config.normalize_weights else config.background_rgb
    return RayRenderResult(composite(w, colors, background), w, depths, None, depths.size)


def render_surface_only(field, ray: Ray, latent, config: RenderConfig):
    """Colour of the located surface point, or the background on a miss."""
    z = check_latent(latent, field.latent_dim)
    hits = locate_surfaces(field, RayBatch.from_rays([ray]), z, config.M, config.m_s, config.tau)
    hit = hits[0]
    if not hit.found:
        return RayRenderResult(config.background_rgb.copy(), np.zeros(0), np.zeros(0), hit, hit.queries_used)
    x_s = ray.at(hit.t_s)[None, :]
    color = field.color(x_s, ray.direction[None, :], z)[0]
    return RayRenderResult(color, np.ones(1), np.array([hit.t_s]), hit, hit.queries_used + 1)


# -- batched rendering ------------------------------------------------------------------


@dataclass
class BatchRender:
    colors: np.ndarray
    weights: np.ndarray
    depths: np.ndarray
    hits: SurfaceHits | None
    queries: np.ndarray


def render_rays(field, rays: RayBatch, latent, config: RenderConfig, delta: float | None, uniforms,
                fns=None) -> BatchRender:
    """Render a batch of rays in the configured mode.

    ``uniforms`` has one row per ray with ``config.N + config.n_fine``
    U[0, 1) draws.  ``delta`` is the sampling half-width around each located
    surface (None covers the whole ray).  Weights and depths are NaN-padded
    for rays that were not sampled.
    """
    z = check_latent(latent, field.latent_dim)
    alpha_fn, color_fn = fns if fns is not None else field.bind(z)
    n, N = len(rays), config.N
    o, d = rays.origins, rays.directions
    bg = config.background_rgb
    tn, tf = rays.t_near, rays.t_far
    uniforms = np.asarray(uniforms, dtype=np.float64)

    if config.mode == "density_cumulative":
        dens = field if hasattr(field, "density") else DensityField(field, (tf - tn) / N)
        depths = stratified_depths(np.full(n, tn), np.full(n, tf), uniforms[:, :N])
        pts = o[:, None, :] + depths[..., None] * d[:, None, :]
        sigma = np.asarray(dens.density(pts.reshape(-1, 3), z)).reshape(n, N)
        deltas = sample_spacing(depths) if N > 1 else np.full((n, 1), tf - tn)
        cols = np.asarray(dens.color(pts.reshape(-1, 3), np.repeat(d, N, axis=0), z)).reshape(n, N, 3)
        w = density_weights(sigma, deltas)
        return BatchRender(composite(w, cols, bg), w, depths, None, np.full(n, N))

    hits = locate_surfaces(field, rays, z, config.M, config.m_s, config.tau, alpha_fn=alpha_fn)
    queries = hits.queries_used.copy()
    colors = np.tile(bg, (n, 1))

    if config.mode == "surface_only":
        idx = np.flatnonzero(hits.found)
        if idx.size:
            x_s = o[idx] + hits.t_s[idx, None] * d[idx]
            colors[idx] = color_fn(x_s, d[idx])
            queries[idx] += 1
        t = np.full((n, 1), np.nan)
        t[idx, 0] = hits.t_s[idx]
        w = np.where(np.isnan(t), np.nan, 1.0)
        return BatchRender(colors, w, t, hits, queries)

    half = (tf - tn) / 2.0 if delta is None else float(delta)
    center = np.where(hits.found, hits.t_s, 0.5 * (tn + tf))
    lo, hi = shrink_windows(center, np.full(n, half), tn, tf)
    sampled = hits.found | (config.miss_policy == "full_volume")
    lo = np.where(hits.found, lo, tn)
    hi = np.where(hits.found, hi, tf)
    idx = np.flatnonzero(sampled)
    total = N + config.n_fine
    all_w = np.full((n, total), np.nan)
    all_t = np.full((n, total), np.nan)
    if idx.size:
        t = stratified_depths(lo[idx], hi[idx], uniforms[idx, :N])
        a, c = _query(alpha_fn, color_fn, o[idx], d[idx], t)
        if config.n_fine:
            w0 = alpha_weights(a, False)
            rng = _RowUniforms(uniforms[idx, N:total])
            merged = hierarchical_fine_samples(t, w0, config.n_fine, rng, lo[idx], hi[idx])
            fine = _new_depths(merged, t)
            af, cf = _query(alpha_fn, color_fn, o[idx], d[idx], fine)
            t, a, c = _merge(t, a, c, fine, af, cf)
        w = alpha_weights(a, config.normalize_weights)
        colors[idx] = composite(w, c, None if config.normalize_weights else bg)
        all_w[idx], all_t[idx] = w, t
        queries[idx] += total
    return BatchRender(colors, all_w, all_t, hits, queries)


class _RowUniforms:
    """Stand-in generator that hands out pre-drawn per-row uniforms."""

    def __init__(self, table):
        self.table = table

    def random(self, size):
        return self.table.reshape(size)


def _query(alpha_fn, color_fn, o, d, t):
    m, k = t.shape
    pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
    a = np.asarray(alpha_fn(pts)).reshape(m, k)
    c = np.asarray(color_fn(pts, np.repeat(d, k, axis=0))).reshape(m, k, 3)
    return a, c


def _new_depths(merged, coarse):
    """Fine depths from a merged row, given the coarse ones it contains."""
    out = np.empty((merged.shape[0], merged.shape[1] - coarse.shape[1]))
    for r in range(merged.shape[0]):
        keep = np.ones(merged.shape[1], dtype=bool)
        pos = np.searchsorted(merged[r], coarse[r])
        for p, v in zip(pos, coarse[r]):
            while merged[r, p] != v or not keep[p]:
                p += 1
            keep[p] = False
        out[r] = merged[r, keep]
    return out


def _merge(t, a, c, tf, af, cf):
    tt = np.concatenate([t, tf], axis=1)
    order = np.argsort(tt, axis=1, kind="stable")
    aa = np.concatenate([a, af], axis=1)
    cc = np.concatenate([c, cf], axis=1)
    return (
        np.take_along_axis(tt, order, 1),
        np.take_along_axis(aa, order, 1),
        np.take_along_axis(cc, order[..., None], 1),
    )


@dataclass
class RenderedImage:
    image: np.ndarray
    weights: np.ndarray
    depths: np.ndarray
    found: np.ndarray
    t_s: np.ndarray
    queries: np.ndarray

    @property
    def mean_queries(self) -> float:
        return float(self.queries.mean())


def render_image(field, camera: Camera, latent, config: RenderConfig, schedule_step: int | None = None,
                 schedule: ShrinkSchedule | None = None, seed: int = 0, image_index: int = 0,
                 threads: int = 1) -> RenderedImage:
    """Render every pixel of ``camera``.

    The sampling half-width is ``schedule.delta(schedule_step)``; a missing
    step means the end of the schedule (``delta_min``), and a missing schedule
    covers the whole ray.  Pixels are processed in fixed row blocks with
    per-pixel random streams, so the worker count never changes the output.
    """
    z = check_latent(latent, field.latent_dim)
    rays = generate_rays(camera, config.t_near, config.t_far)
    if schedule is None:
        delta = None
    else:
        delta = schedule.delta_min if schedule_step is None else schedule.delta(schedule_step)
    h, w = camera.height, camera.width
    total = config.N + config.n_fine
    fns = field.bind(z)

    def work(row0):
        rows = range(row0, min(row0 + CHUNK_ROWS, h))
        pix = np.arange(rows.start * w, rows.stop * w)
        u = pixel_uniforms(seed, image_index, pix, 0, total)
        try:
            out = render_rays(field, rays.subset(pix), z, config, delta, u, fns=fns)
        except NumericError as exc:
            if exc.ray is None:
                raise
            p = int(pix[exc.ray])
            raise NumericError(f"non-finite alpha at pixel (row={p // w}, col={p % w})", pixel=(p // w, p % w)) from exc
        bad = ~np.all(np.isfinite(out.colors), axis=1)
        if bad.any():
            p = int(pix[np.argmax(bad)])
            raise NumericError(f"non-finite colour at pixel (row={p // w}, col={p % w})", pixel=(p // w, p % w))
        return pix, out

    starts = list(range(0, h, CHUNK_ROWS))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]

    n = h * w
    k = 1 if config.mode == "surface_only" else total
    image = np.empty((n, 3))
    weights = np.full((n, k), np.nan)
    depths = np.full((n, k), np.nan)
    found = np.zeros(n, dtype=bool)
    t_s = np.full(n, np.nan)
    queries = np.zeros(n, dtype=np.int64)
    for pix, out in parts:
        image[pix] = out.colors
        weights[pix] = out.weights
        depths[pix] = out.depths
        queries[pix] = out.queries
        if out.hits is not None:
            found[pix] = out.hits.found
            t_s[pix] = out.hits.t_s
    return RenderedImage(image.reshape(h, w, 3), weights, depths, found, t_s, queries)


def render_normal_map(field, camera: Camera, latent, config: RenderConfig) -> np.ndarray:
    """Outward unit normals at located surface points, encoded ``(n + 1) / 2``.

    The outward normal is ``-grad(alpha) / |grad(alpha)|`` because alpha grows
    into the object.  Misses and degenerate gradients encode as 0.5 grey.
    """
    z = check_latent(latent, field.latent_dim)
    rays = generate_rays(camera, config.t_near, config.t_far)
    hits = locate_surfaces(field, rays, z, config.M, config.m_s, config.tau)
    out = np.full((len(rays), 3), 0.5)
    idx = np.flatnonzero(hits.found)
    if idx.size:
        x_s = rays.origins[idx] + hits.t_s[idx, None] * rays.directions[idx]
        g = np.asarray(field.alpha_gradient(x_s, z))
        norm = np.linalg.norm(g, axis=1)
        ok = norm >= DEGENERATE_GRADIENT
        normals = -g[ok] / norm[ok, None]
        out[idx[ok]] = (normals + 1.0) / 2.0
    return out.reshape(camera.height, camera.width, 3)


# -- image files -------------------------------------------------------------------------


def to_bytes8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def encode_ppm(image) -> bytes:
    """Binary PPM (P6, maxval 255)."""
    img = to_bytes8(image)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_ppm(blob: bytes) -> np.ndarray:
    m = _PPM_HEADER.match(blob)
    if m is None or int(m.group(3)) != 255:
        raise ValueError("not a P6 PPM with maxval 255")
    w, h = int(m.group(1)), int(m.group(2))
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=m.end())
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_image(path, image) -> None:
    """Write PPM, or PNG when the suffix is ``.png`` (needs Pillow)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(to_bytes8(image)).save(path)
    else:
        path.write_bytes(encode_ppm(image))


"""Surface-concentration and image-quality measurements."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from ._validation import check_images, check_latent
from .render import RenderConfig, alpha_weights, density_weights, render_rays, sample_spacing
from .sampling import Camera, RayBatch, generate_rays, pixel_uniforms

PSNR_IDENTICAL = 99.0
MIN_WEIGHT_SUM = 1e-12
CONCENTRATION_SAMPLES = 36
DISPLAY_SCALE = 1e-4


def depth_variance(weights, depths):
    """Weighted depth variance ``N / ((N - 1) sum w) * sum w (t - tbar)^2``.

    ``tbar = sum w t / sum w``.  Works along the last axis.  Rays whose
    weights sum to at most 1e-12 have no defined concentration and yield NaN.
    """
    w = np.asarray(weights, dtype=np.float64)
    t = np.asarray(depths, dtype=np.float64)
    if w.shape != t.shape:
        raise ValueError(f"weights {w.shape} and depths {t.shape} differ in shape")
    n = w.shape[-1]
    if n < 2:
        raise ValueError("need at least two samples per ray")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum(axis=-1)
    ok = total > MIN_WEIGHT_SUM
    safe = np.where(ok, total, 1.0)
    tbar = (w * t).sum(axis=-1) / safe
    spread = (w * (t - tbar[..., None]) ** 2).sum(axis=-1)
    out = np.where(ok, n / ((n - 1) * safe) * spread, np.nan)
    return float(out) if out.ndim == 0 else out


def weighted_depth(densities, depths):
    """Density-weighted depth ``sum w_i t_i`` with compositing weights.

    Returns NaN when every density is zero (no surface to locate).
    """
    sigma = np.asarray(densities, dtype=np.float64)
    t = np.asarray(depths, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("densities must be non-negative")
    deltas = sample_spacing(t)
    w = density_weights(sigma, deltas)
    out = np.where(np.all(sigma == 0, axis=-1), np.nan, (w * t).sum(axis=-1))
    return float(out) if out.ndim == 0 else out


def psnr(image_a, image_b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give 99."""
    a, b = check_images(image_a, image_b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return min(10.0 * np.log10(1.0 / mse), PSNR_IDENTICAL)


@dataclass
class ConcentrationReport:
    values: np.ndarray
    mean: float
    n_samples: int
    span: tuple
    undefined: int = 0

    def as_dict(self) -> dict:
        return {
            "sigma_t_mean": self.mean,
            "sigma_t_mean_x1e4": self.mean / DISPLAY_SCALE,
            "n_samples": self.n_samples,
            "span": list(self.span),
            "rays": int(self.values.size),
            "undefined_rays": self.undefined,
        }


def concentration(field, rays: RayBatch, latent=None, n_samples: int = CONCENTRATION_SAMPLES) -> ConcentrationReport:
    """Sigma_t over ``n_samples`` equally spaced depths covering each ray.

    Weights are plain alpha-compositing weights (clamped, not normalised).
    The image mean runs over rays with a defined concentration; the others
    are counted in ``undefined``.
    """
    z = check_latent(latent, field.latent_dim)
    t = np.linspace(rays.t_near, rays.t_far, n_samples)
    n = len(rays)
    pts = rays.origins[:, None, :] + t[None, :, None] * rays.directions[:, None, :]
    alphas = np.asarray(field.alpha(pts.reshape(-1, 3), z)).reshape(n, n_samples)
    w = alpha_weights(alphas)
    values = depth_variance(w, np.broadcast_to(t, w.shape))
    defined = ~np.isnan(values)
    mean = float(values[defined].mean()) if defined.any() else float("nan")
    return ConcentrationReport(values, mean, n_samples, (rays.t_near, rays.t_far), int((~defined).sum()))


def image_concentration(field, cameras, latent=None, t_near=0.88, t_far=1.12,
                        n_samples: int = CONCENTRATION_SAMPLES) -> ConcentrationReport:
    """Mean Sigma_t over every pixel of every camera."""
    if isinstance(cameras, Camera):
        cameras = [cameras]
    reports = [concentration(field, generate_rays(c, t_near, t_far), latent, n_samples) for c in cameras]
    values = np.concatenate([r.values for r in reports])
    defined = ~np.isnan(values)
    mean = float(values[defined].mean()) if defined.any() else float("nan")
    return ConcentrationReport(values, mean, n_samples, (t_near, t_far), int((~defined).sum()))


@dataclass
class EquivalenceRow:
    delta_min: float
    observed_max_diff: float
    bound: float
    violated: bool
    rays_compared: int


@dataclass
class EquivalenceReport:
    k_c: float
    N: int
    rows: list = dc_field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(r.violated for r in self.rows)

    @property
    def monotone(self) -> bool:
        """Observed differences never grow as delta_min shrinks."""
        ordered = sorted(self.rows, key=lambda r: -r.delta_min)
        obs = [r.observed_max_diff for r in ordered]
        return all(b <= a for a, b in zip(obs, obs[1:]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["delta_min", "observed_max_diff", "bound", "violated"])
        for r in self.rows:
            writer.writerow([repr(r.delta_min), repr(r.observed_max_diff), repr(r.bound), str(r.violated).lower()])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        lines = []
        for r in self.rows:
            d = asdict(r)
            d.update(k_c=self.k_c, N=self.N)
            lines.append(json.dumps(d, sort_keys=True))
        return "\n".join(lines) + "\n"


def equivalence_report(field, rays: RayBatch, latent=None, deltas=(0.1, 0.03, 0.01), N: int = 12,
                       config: RenderConfig | None = None, seed: int = 0) -> EquivalenceReport:
    """Compare windowed cumulative and surface-only colours per delta_min.

    Cumulative renders use normalised weights over ``N`` stratified samples
    in ``[t_s - delta, t_s + delta]``; only rays with a located surface are
    compared.  The same uniforms are reused for every delta so the sweep
    isolates the window width.
    """
    base = config or RenderConfig(N=N, t_near=rays.t_near, t_far=rays.t_far)
    z = check_latent(latent, field.latent_dim)
    k_c = float(field.color_lipschitz(z))
    fns = field.bind(z)
    cum_cfg = RenderConfig(**{**asdict(base), "N": N, "mode": "alpha_cumulative", "normalize_weights": True,
                              "miss_policy": "background", "n_fine": 0})
    surf_cfg = RenderConfig(**{**asdict(cum_cfg), "mode": "surface_only"})
    u = pixel_uniforms(seed, 0, np.arange(len(rays)), 0, N)
    surf = render_rays(field, rays, z, surf_cfg, None, u, fns=fns)
    hit = surf.hits.found
    report = EquivalenceReport(k_c, N)
    for delta in deltas:
        cum = render_rays(field, rays, z, cum_cfg, delta, u, fns=fns)
        diff = np.abs(cum.colors[hit] - surf.colors[hit])
        observed = float(diff.max()) if diff.size else 0.0
        bound = 2.0 * k_c * N * float(delta)
        report.rows.append(EquivalenceRow(float(delta), observed, bound, bool(observed > bound), int(hit.sum())))
    return report

"""Multi-view photometric fit of a FiLM-SIREN field with the shrinking window.

A small stand-in for adversarial training: reference views of an analytic
scene supervise a neural occupancy field through windowed alpha compositing.
The window around each located surface shrinks with the schedule, or stays
at its initial width when shrinking is disabled.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import autodiff as ad
from .exceptions import DivergenceError
from .field import AnalyticField, ColorFunction, FilmSirenField
from .loss import LossWeights, normal_term, opacity_regularizer, random_offsets
from .metrics import image_concentration, psnr
from .render import RenderConfig, alpha_weights, composite, render_image
from .rootfind import locate_surfaces
from .sampling import (
    PoseDistribution,
    RayBatch,
    ShrinkSchedule,
    generate_rays,
    sample_pose,
    shrink_windows,
    stratified_depths,
)

log = logging.getLogger(__name__)


def default_target() -> AnalyticField:
    """Sphere of radius 0.08 at the origin with a linear colour ramp."""
    ramp = ColorFunction("ramp", base=(0.55, 0.45, 0.4), gradient=np.diag([1.5, 1.5, -1.0]))
    return AnalyticField.sphere(radius=0.08, sharpness=200.0, color=ramp)


@dataclass
class FitSettings:
    steps: int = 2000
    views: int = 24
    image_size: int = 32
    batch_rays: int = 256
    learning_rate: float = 1e-3
    lr_decay: float = 0.1
    pretrain_steps: int = 600
    shrink: bool = True
    t_near: float = 0.88
    t_far: float = 1.12
    gamma: float = math.log(12.0) / 800.0
    delta_min: float = 0.01
    eval_delta: float = 0.01
    N: int = 12
    M: int = 12
    m_s: int = 3
    tau: float = 0.5
    fov_deg: float = 12.0
    pose: PoseDistribution = dc_field(default_factory=PoseDistribution)
    weights: LossWeights = dc_field(
        default_factory=lambda: LossWeights(lambda_normal=0.002, lambda_opac_init=1e-5, gamma_opac=2e-3,
                                            lambda_opac_cap=1e-4)
    )
    normal_points: int = 32
    eval_every: int = 500
    eval_views: int = 4
    latent_dim: int = 16
    n_layers: int = 3
    width: int = 48
    omega0: float = 30.0
    input_scale: float = 8.0
    seed: int = 0
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    progressive: tuple = ()

    def schedule(self) -> ShrinkSchedule:
        s = ShrinkSchedule.for_bounds(self.t_near, self.t_far, self.gamma, self.delta_min)
        if not self.shrink:
            s = ShrinkSchedule(s.delta_init, 0.0, s.delta_min)
        return s


class DivergenceMonitor:
    """Raises once the loss exceeds ``factor`` times the first loss for
    ``patience`` consecutive updates.  A non-finite loss counts as above."""

    def __init__(self, factor: float = 10.0, patience: int = 100):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.streak = 0

    def update(self, loss: float) -> None:
        if self.initial is None:
            self.initial = loss
        above = not loss <= self.factor * abs(self.initial)
        self.streak = self.streak + 1 if above else 0
        if self.streak >= self.patience:
            raise DivergenceError(f"loss {loss:.4g} above {self.factor}x initial for {self.streak} steps")


@dataclass
class FitResult:
    field: FilmSirenField
    latent: np.ndarray
    history: list
    final: dict
    cameras: list
    references: np.ndarray


def reference_views(target, settings: FitSettings, rng):
    """Cameras drawn from the pose prior and surface-only renders of ``target``."""
    size = settings.image_size
    cams = [sample_pose(settings.pose, rng, settings.fov_deg, size, size) for _ in range(settings.views)]
    cfg = RenderConfig(M=settings.M, m_s=settings.m_s, tau=settings.tau, mode="surface_only",
                       t_near=settings.t_near, t_far=settings.t_far)
    images = np.stack([render_image(target, c, None, cfg).image for c in cams])
    return cams, images


def evaluate(field, latent, cameras, references, settings: FitSettings, delta: float) -> dict:
    """Image-mean Sigma_t and PSNRs of the current field on ``cameras``.

    Cumulative renders use the fixed ``settings.eval_delta`` window, the way
    a checkpoint is rendered afterwards, so paired runs are compared under
    the same renderer.  ``psnr_train_window`` repeats the
    cumulative-vs-surface comparison at the run's current window ``delta``.
    """
    common = dict(N=settings.N, M=settings.M, m_s=settings.m_s, tau=settings.tau, t_near=settings.t_near,
                  t_far=settings.t_far)
    cum_cfg = RenderConfig(mode="alpha_cumulative", **common)
    surf_cfg = RenderConfig(mode="surface_only", **common)
    fixed = ShrinkSchedule(settings.eval_delta, 0.0, settings.eval_delta)
    train = ShrinkSchedule(delta, 0.0, delta)
    p_cum, p_surf, p_eq, p_train = [], [], [], []
    for i, (cam, ref) in enumerate(zip(cameras, references)):
        cum = render_image(field, cam, latent, cum_cfg, schedule=fixed, seed=settings.seed, image_index=i).image
        wide = render_image(field, cam, latent, cum_cfg, schedule=train, seed=settings.seed, image_index=i).image
        surf = render_image(field, cam, latent, surf_cfg).image
        p_cum.append(psnr(cum, ref))
        p_surf.append(psnr(surf, ref))
        p_eq.append(psnr(cum, surf))
        p_train.append(psnr(wide, surf))
    conc = image_concentration(field, cameras, latent, settings.t_near, settings.t_far)
    hit = np.concatenate([
        locate_surfaces(field, generate_rays(c, settings.t_near, settings.t_far), latent, settings.M,
                        settings.m_s, settings.tau).found
        for c in cameras
    ])
    on_surface = conc.values[hit & ~np.isnan(conc.values)]
    return {
        "sigma_t": conc.mean,
        "sigma_t_hit": float(on_surface.mean()) if on_surface.size else float("nan"),
        "hit_fraction": float(hit.mean()),
        "psnr_cumulative": float(np.mean(p_cum)),
        "psnr_surface": float(np.mean(p_surf)),
        "psnr_cumulative_vs_surface": float(np.mean(p_eq)),
        "psnr_train_window": float(np.mean(p_train)),
        "eval_delta": float(settings.eval_delta),
        "delta": float(delta),
    }


def _ray_pool(cameras, references, settings):
    batches = [generate_rays(c, settings.t_near, settings.t_far) for c in cameras]
    origins = np.concatenate([b.origins for b in batches])
    directions = np.concatenate([b.directions for b in batches])
    colors = references.reshape(-1, 3)
    return RayBatch(origins, directions, settings.t_near, settings.t_far), colors


def training_loss(field, latent, rays: RayBatch, targets, settings: FitSettings, delta: float, step: int, rng,
                  background=(1.0, 1.0, 1.0)):
    """Record one step's objective on a fresh tape; returns (tape, total, parts).

    Rays with a located surface are sampled in the window around it and
    composited with normalised weights.  Rays without one are sampled over
    the whole volume and composited over the background, so empty space is
    still supervised.
    """
    n, N = len(rays), settings.N
    o, d = rays.origins, rays.directions
    hits = locate_surfaces(field, rays, latent, settings.M, settings.m_s, settings.tau)
    found = hits.found
    center = np.where(found, hits.t_s, 0.5 * (rays.t_near + rays.t_far))
    lo, hi = shrink_windows(center, np.full(n, delta), rays.t_near, rays.t_far)
    lo = np.where(found, lo, rays.t_near)
    hi = np.where(found, hi, rays.t_far)
    t = stratified_depths(lo, hi, rng.random((n, N)))
    pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)

    tape = ad.Tape()
    net = field.network(latent, tape)
    h = net.features(pts)
    alphas = ad.reshape(net.alpha_from_features(h), (n, N))
    colors = ad.reshape(net.color_from_features(h, np.repeat(d, N, axis=0)), (n, N, 3))
    mask = found[:, None].astype(np.float64)
    color = mask * composite(alpha_weights(alphas, True), colors) + (1.0 - mask) * composite(
        alpha_weights(alphas, False), colors, np.asarray(background, dtype=np.float64)
    )
    diff = color - targets
    recon = ad.mean(diff * diff)
    opac = opacity_regularizer(alphas)

    idx = np.flatnonzero(found)[: settings.normal_points]
    x_s = o[idx] + hits.t_s[idx, None] * d[idx]
    nt = normal_term(field, x_s, latent, network=net, offsets=random_offsets(rng, idx.size))
    normal = nt.value
    if idx.size:
        normal = normal / idx.size
    w = settings.weights
    total = recon + w.lambda_normal * normal + w.lambda_opacity(step) * opac
    parts = {
        "recon": float(ad.value_of(recon)),
        "normal": float(ad.value_of(normal)),
        "opacity": float(ad.value_of(opac)),
        "hit_fraction": float(found.mean()),
    }
    return tape, total, parts


def fit(settings: FitSettings | None = None, target=None, on_checkpoint=None, initial: FilmSirenField | None = None,
        ) -> FitResult:
    """Train a FiLM-SIREN field on reference views of ``target``.

    The latent is fixed at zero; only the network weights are optimised with
    Adam.  With ``progressive`` image sizes the steps are split evenly
    between those sizes and ``image_size``, coarsest first; evaluation always
    uses ``image_size``.  ``on_checkpoint(step, record)`` is called after every evaluation.
    Raises :class:`DivergenceError` when the loss stays above
    ``divergence_factor`` times its initial value for ``divergence_patience``
    consecutive steps.
    """
    s = settings or FitSettings()
    target = target or default_target()
    rng = np.random.default_rng(s.seed)
    cameras, references = reference_views(target, s, rng)
    eval_idx = np.linspace(0, len(cameras) - 1, min(s.eval_views, len(cameras))).round().astype(int)
    eval_cams = [cameras[i] for i in eval_idx]
    eval_refs = references[eval_idx]
    stages = []
    for size in s.progressive:
        # a fresh generator with the same seed redraws the same poses at this size
        cams, refs = reference_views(target, replace(s, image_size=size), np.random.default_rng(s.seed))
        stages.append(_ray_pool(cams, refs, s))
    stages.append(_ray_pool(cameras, references, s))
    pool, pool_colors = stages[0]

    field = initial.copy() if initial is not None else FilmSirenField.initialize(
        s.latent_dim, s.n_layers, s.width, seed=s.seed, omega0=s.omega0, input_scale=s.input_scale)
    latent = np.zeros(field.latent_dim)
    schedule = s.schedule()
    opt = ad.Adam(s.learning_rate)
    history = []

    def checkpoint(step, loss):
        record = {"step": step, "loss": loss, **evaluate(field, latent, eval_cams, eval_refs, s, schedule.delta(step))}
        history.append(record)
        log.info("step %d loss %.5f sigma_t %.3e hit %.3e psnr %.2f eq %.2f", step, loss, record["sigma_t"],
                 record["sigma_t_hit"], record["psnr_cumulative"], record["psnr_cumulative_vs_surface"])
        if on_checkpoint is not None:
            on_checkpoint(step, record)

    def train_step(step, delta, lr):
        pick = rng.choice(len(pool), size=s.batch_rays, replace=False)
        tape, total, _ = training_loss(field, latent, pool.subset(pick), pool_colors[pick], s, delta, step, rng)
        grad = tape.backward(total)[0]
        opt.learning_rate = lr
        field.params = opt.step(field.params, grad)
        return float(ad.value_of(total))

    if initial is None and s.steps > 0:
        # Shared warm-up over the full volume, so paired runs start from the same coarse shape.
        full = schedule.delta_init
        for step in range(s.pretrain_steps):
            train_step(0, full, s.learning_rate)

    loss = float("nan")
    monitor = DivergenceMonitor(s.divergence_factor, s.divergence_patience)
    for step in range(s.steps):
        pool, pool_colors = stages[step * len(stages) // max(s.steps, 1)]
        lr = s.learning_rate * s.lr_decay ** (step / max(s.steps, 1))
        loss = train_step(step, schedule.delta(step), lr)
        monitor.update(loss)
        if s.eval_every and step % s.eval_every == 0 and step:
            checkpoint(step, loss)
    checkpoint(s.steps, loss)
    return FitResult(field, latent, history, history[-1], cameras, references)


@dataclass
class Ablation:
    shrink: dict
    no_shrink: dict
    results: tuple


def shrink_ablation(settings: FitSettings | None = None, target=None) -> Ablation:
    """Paired fits from the same seed, with and without the shrinking window."""
    s = settings or FitSettings()
    runs = tuple(fit(replace(s, shrink=flag), target) for flag in (True, False))
    return Ablation(runs[0].final, runs[1].final, runs)

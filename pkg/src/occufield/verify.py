"""Self-check suites: closed-form intersections, bound checks, finite differences."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .field import AnalyticField, FilmSirenField
from .loss import (
    gan_softplus,
    normal_regularizer,
    opacity_regularizer,
    r1_penalty,
    random_offsets,
    reconstruction_loss,
)
from .metrics import equivalence_report
from .render import alpha_weights, composite
from .rootfind import locate_surfaces
from .sampling import RayBatch

SUITES = ("equivalence", "rootfind", "gradients")


@dataclass
class SuiteResult:
    suite: str
    passed: bool
    summary: dict
    violations: list = dc_field(default_factory=list)

    def as_dict(self) -> dict:
        return {"suite": self.suite, "passed": self.passed, **self.summary, "violations": self.violations[:20]}


# -- closed-form entry depths -------------------------------------------------------


def sphere_entry(origins, directions, center, radius):
    """First t >= 0 where each ray enters the sphere, NaN on a miss."""
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, directions)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    with np.errstate(invalid="ignore"):
        root = np.sqrt(disc)
    t0 = -b - root
    t0 = np.where((disc >= 0) & (t0 >= 0), t0, np.nan)
    return t0


def box_entry(origins, directions, center, half_extents):
    """Slab-method entry depth for an axis-aligned box, NaN on a miss."""
    lo = center - half_extents
    hi = center + half_extents
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    t_enter = np.nanmax(np.minimum(t1, t2), axis=1)
    t_exit = np.nanmin(np.maximum(t1, t2), axis=1)
    ok = (t_enter <= t_exit) & (t_enter >= 0)
    return np.where(ok, t_enter, np.nan)


def oracle_sdf(field: AnalyticField, points):
    """Closed-form signed distance of a sphere or box, written independently of the field."""
    q = points - field.center
    if field.kind == "sphere":
        return np.linalg.norm(q, axis=-1) - field.radius
    excess = np.abs(q) - field.half_extents
    return np.linalg.norm(np.maximum(excess, 0.0), axis=-1) + np.minimum(excess.max(axis=-1), 0.0)


def penetration_after(field: AnalyticField, rays: RayBatch, start, length, samples=65):
    """Deepest inside distance reached on ``[start, start + length]`` along each ray."""
    s = np.nan_to_num(start)[:, None] + np.linspace(0.0, length, samples)[None, :]
    pts = rays.origins[:, None, :] + s[..., None] * rays.directions[:, None, :]
    return -oracle_sdf(field, pts).min(axis=1)


def random_rays_toward(rng, n, target, spread, distance=1.0, t_near=0.88, t_far=1.12) -> RayBatch:
    """Rays from a sphere of radius ``distance`` aimed near ``target``."""
    target = np.asarray(target, dtype=np.float64)
    v = rng.standard_normal((n, 3))
    origins = target + distance * v / np.linalg.norm(v, axis=1, keepdims=True)
    aim = target + rng.uniform(-spread, spread, (n, 3))
    d = aim - origins
    return RayBatch(origins, d / np.linalg.norm(d, axis=1, keepdims=True), t_near, t_far)


def _oracle_entry(field: AnalyticField, rays: RayBatch, tau: float):
    # Level set alpha = tau sits at inside distance logit(tau) / k.
    shift = math.log(tau / (1.0 - tau)) / field.sharpness
    if field.kind == "sphere":
        return sphere_entry(rays.origins, rays.directions, field.center, field.radius - shift)
    if field.kind == "box":
        return box_entry(rays.origins, rays.directions, field.center, field.half_extents - shift)
    raise ValueError(f"no closed-form oracle for {field.kind!r}")


def rootfind_suite(field: AnalyticField, n_rays=1000, seed=0, M=12, m_s=3, tau=0.5, tol=1e-3,
                   t_near=0.88, t_far=1.12, min_depth=None) -> SuiteResult:
    """Located depths against closed-form entry depths on random rays.

    Only well-posed rays are compared: the exact entry lies more than one
    bin inside the bounds, and within one bin after it the ray reaches at
    least ``min_depth`` (default 2/k, where alpha exceeds 0.88) inside the
    shape.  Rays that skim a face or clip an edge cross tau so gently that
    the depth is ill-conditioned for any bin scan.
    """
    rng = np.random.default_rng(seed)
    size = float(field.radius if field.kind == "sphere" else np.max(field.half_extents))
    rays = random_rays_toward(rng, n_rays, field.center, 0.8 * size, 1.0, t_near, t_far)
    exact = _oracle_entry(field, rays, tau)
    hits = locate_surfaces(field, rays, None, M, m_s, tau)
    bin_width = (t_far - t_near) / M
    depth = 2.0 / field.sharpness if min_depth is None else min_depth
    inside = (~np.isnan(exact) & (exact > t_near + bin_width) & (exact < t_far - bin_width)
              & (penetration_after(field, rays, exact, bin_width) >= depth))
    both = inside & hits.found
    err = np.abs(hits.t_s - exact)
    bad = np.flatnonzero(both & ~(err < tol))
    missed = np.flatnonzero(inside & ~hits.found)
    violations = [
        {"ray": int(i), "origin": rays.origins[i].tolist(), "direction": rays.directions[i].tolist(),
         "t_s": float(hits.t_s[i]), "exact": float(exact[i])}
        for i in np.concatenate([bad, missed])
    ]
    summary = {
        "rays": int(n_rays),
        "well_posed": int(inside.sum()),
        "compared": int(both.sum()),
        "max_error": float(np.nanmax(err[both])) if both.any() else 0.0,
        "tolerance": tol,
        "missed": int(missed.size),
    }
    return SuiteResult("rootfind", not violations, summary, violations)


def certified_field(latent, seed=0, omega0=10.0, alpha_gain=10.0, extent=0.1) -> FilmSirenField:
    """Untrained FiLM-SIREN turned into an occupancy field with crisp crossings.

    The alpha bias is shifted so the median logit over the cube
    ``[-extent, extent]^3`` is zero (about half that region is occupied), then
    the alpha head is scaled by ``alpha_gain``.  A low ``omega0`` keeps colour
    smooth on the scale of the sampling window, the regime the
    cumulative/surface bound is about.
    """
    field = FilmSirenField.initialize(16, 3, 48, seed=seed, omega0=omega0, input_scale=8.0)
    grid = np.linspace(-extent, extent, 9)
    pts = np.stack(np.meshgrid(grid, grid, grid, indexing="ij"), axis=-1).reshape(-1, 3)
    w_off, w_shape = field.layout["alpha.w"]
    b_off, _ = field.layout["alpha.b"]
    w = field.params[w_off:w_off + w_shape[1]]
    logits = field.network(latent).features(pts) @ w + field.params[b_off]
    field.params[b_off] = alpha_gain * (field.params[b_off] - np.median(logits))
    field.params[w_off:w_off + w_shape[1]] *= alpha_gain
    return field


def equivalence_suite(field, rays: RayBatch, latent=None, deltas=(0.1, 0.03, 0.01), N=12, seed=0) -> SuiteResult:
    """Bound violations, plus a failure when no ray hits a surface (a vacuous check)."""
    report = equivalence_report(field, rays, latent, deltas, N, seed=seed)
    violations = [r.__dict__ for r in report.rows if r.violated]
    if report.rows and report.rows[0].rays_compared == 0:
        violations.append({"reason": "no ray crosses tau; nothing was compared"})
    summary = {
        "k_c": report.k_c,
        "rows": [r.__dict__ for r in report.rows],
        "monotone": report.monotone,
    }
    return SuiteResult("equivalence", not violations, summary, violations)


# -- finite-difference gradient probes -----------------------------------------------------


def probe_field(seed=0) -> FilmSirenField:
    """Two-layer field small enough for dense finite-difference probing."""
    return FilmSirenField.initialize(latent_dim=4, n_layers=2, width=8, seed=seed, omega0=3.0, input_scale=4.0)


def relative_error(a, b, floor=1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class ProbeSetup:
    latent: np.ndarray
    points: np.ndarray
    directions: np.ndarray
    depths: np.ndarray
    target: np.ndarray
    surface: np.ndarray
    offsets: np.ndarray


def probe_setup(seed=0, n_rays=6, n_samples=5) -> ProbeSetup:
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal(4) * 0.5
    o = np.tile([0.0, 0.0, 1.0], (n_rays, 1))
    d = np.column_stack([rng.uniform(-0.1, 0.1, (n_rays, 2)), -np.ones(n_rays)])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    t = np.sort(rng.uniform(0.88, 1.12, (n_rays, n_samples)), axis=1)
    pts = o[:, None, :] + t[..., None] * d[:, None, :]
    target = rng.uniform(0, 1, (n_rays, 3))
    surface = rng.uniform(-0.1, 0.1, (4, 3))
    return ProbeSetup(latent, pts, d, t, target, surface, random_offsets(rng, 4))


def _objectives(field: FilmSirenField, setup: ProbeSetup):
    """Named scalar objectives of the flat parameters, each built on a tape."""
    n, k, _ = setup.points.shape
    flat = setup.points.reshape(-1, 3)
    dirs = np.repeat(setup.directions, k, axis=0)

    def render(net):
        h = net.features(flat)
        a = ad.reshape(net.alpha_from_features(h), (n, k))
        c = ad.reshape(net.color_from_features(h, dirs), (n, k, 3))
        return a, c

    def alpha_out(net):
        return ad.sum(net.alpha(flat) * np.linspace(0.5, 1.5, n * k))

    def color_out(net):
        return ad.sum(net.color(flat, dirs) * np.linspace(-1.0, 1.0, n * k * 3).reshape(n * k, 3))

    def recon(net):
        a, c = render(net)
        return reconstruction_loss(composite(alpha_weights(a, True), c), setup.target)

    def opacity(net):
        return opacity_regularizer(render(net)[0])

    def normal(net):
        return normal_regularizer(field, setup.surface, setup.latent, network=net, offsets=setup.offsets)

    def gan(net):
        a, c = render(net)
        score = ad.mean(composite(alpha_weights(a, False), c, np.ones(3))) * 4.0 - 2.0
        return gan_softplus(score)

    return {"alpha": alpha_out, "color": color_out, "reconstruction": recon, "opacity": opacity,
            "normal": normal, "gan": gan}


def _evaluate(field, setup, fn, params, tape=None):
    f = field.copy()
    f.params = params
    net = f.network(setup.latent, tape)
    return fn(net)


def gradient_suite(n_probes=500, seed=0, h=1e-6, tol=1e-4) -> SuiteResult:
    """Directional finite differences against reverse-mode gradients.

    Each probe picks an objective and a random unit direction in parameter
    space and compares ``g . v`` with a central difference of step ``h``.
    """
    rng = np.random.default_rng(seed)
    field = probe_field(seed)
    setup = probe_setup(seed)
    objectives = _objectives(field, setup)
    names = list(objectives)
    grads = {}
    for name, fn in objectives.items():
        tape = ad.Tape()
        out = _evaluate(field, setup, fn, field.params, tape)
        grads[name] = tape.backward(out)[0]
    worst = {name: 0.0 for name in names}
    violations = []
    for i in range(n_probes):
        name = names[i % len(names)]
        v = rng.standard_normal(field.n_params)
        v /= np.linalg.norm(v)
        fn = objectives[name]
        up = float(_evaluate(field, setup, fn, field.params + h * v))
        down = float(_evaluate(field, setup, fn, field.params - h * v))
        fd = (up - down) / (2 * h)
        an = float(grads[name] @ v)
        err = relative_error(an, fd)
        worst[name] = max(worst[name], err)
        if not err < tol:
            violations.append({"probe": i, "objective": name, "analytic": an, "finite_difference": fd,
                               "relative_error": err})
    summary = {"probes": n_probes, "tolerance": tol, "max_relative_error": max(worst.values()),
               "per_objective": worst}
    r1 = r1_input_check(seed)
    summary["r1_input_gradient_error"] = r1
    if not r1 < tol:
        violations.append({"objective": "r1_input_gradient", "relative_error": r1})
    return SuiteResult("gradients", not violations, summary, violations)


def r1_input_check(seed=0, h=1e-6) -> float:
    """R1 of a smooth stub discriminator against finite differences of D."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(12)
    x0 = rng.standard_normal(12)

    def disc(x):
        return ad.sum(ad.sin(x * w)) + 0.5 * ad.sum(x * x)

    penalty = r1_penalty(disc, x0, 1.0)
    grad = np.empty(12)
    for i in range(12):
        e = np.zeros(12)
        e[i] = h
        grad[i] = (float(disc(x0 + e)) - float(disc(x0 - e))) / (2 * h)
    return relative_error(penalty, float(grad @ grad))

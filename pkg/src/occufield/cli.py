"""``occufield`` command-line tool.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numeric error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import SceneConfig, load_config
from .exceptions import ConfigurationError, OccufieldError
from .extract import euler_characteristic, marching_cubes, write_obj
from .field import AnalyticField, FilmSirenField
from .fit import FitSettings, default_target, fit
from .loss import LossWeights
from .metrics import image_concentration
from .render import encode_ppm, render_image, write_image
from .rootfind import BUDGET_MODES, query_budget
from .sampling import ShrinkSchedule
from .verify import (
    certified_field,
    equivalence_suite,
    gradient_suite,
    random_rays_toward,
    rootfind_suite,
)

log = logging.getLogger("occufield")

THREADS_ENV = "OCCUFIELD_THREADS"


def _threads(args) -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
    else:
        n = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if n < 1:
        raise ConfigurationError("thread count must be >= 1")
    return n


def _config(args) -> SceneConfig:
    return load_config(args.config) if args.config else SceneConfig()


def _base_dir(args):
    return Path(args.config).parent if args.config else None


def _latent(cfg: SceneConfig, field, seed):
    return cfg.latent_code(field.latent_dim, seed)


def _finite(value):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _emit_json(record, path=None):
    line = json.dumps(_finite(record), sort_keys=True, allow_nan=False)
    if path:
        with open(path, "a") as fh:
            fh.write(line + "\n")
    else:
        print(line)


# -- render ------------------------------------------------------------------------------


def cmd_render(args) -> int:
    cfg = _config(args)
    field = cfg.build_field(_base_dir(args))
    latent = _latent(cfg, field, args.latent_seed)
    rcfg = cfg.render_config(args.mode)
    schedule = None if args.full_volume else cfg.shrink_schedule()
    out = render_image(field, cfg.camera_obj(), latent, rcfg, args.step, schedule, seed=cfg.seed,
                       threads=_threads(args))
    path = Path(args.out)
    write_image(path, out.image)
    if args.diagnostics:
        conc = image_concentration(field, cfg.camera_obj(), latent, cfg.bounds.t_near, cfg.bounds.t_far)
        delta = None if schedule is None else (schedule.delta_min if args.step is None else schedule.delta(args.step))
        record = {
            "command": "render",
            "mode": rcfg.mode,
            "output": str(path),
            "width": cfg.camera.width,
            "height": cfg.camera.height,
            "delta": delta,
            "hit_fraction": float(out.found.mean()),
            "mean_queries": out.mean_queries,
            "sigma_t_mean": conc.mean,
            "sha256": hashlib.sha256(encode_ppm(out.image)).hexdigest(),
        }
        _emit_json(record, None if args.diagnostics == "-" else args.diagnostics)
    return 0


# -- fit ---------------------------------------------------------------------------------


def fit_settings(cfg: SceneConfig, steps=None, views=None, shrink=True) -> FitSettings:
    """Toy-fit settings drawn from a scene configuration."""
    f = cfg.fit
    steps = f.steps if steps is None else steps
    defaults = FitSettings()
    delta_min = f.shrink_delta_min if f.shrink_delta_min is not None else defaults.delta_min
    gamma = f.shrink_gamma if f.shrink_gamma is not None else defaults.gamma
    weights = defaults.weights if f.loss is None else LossWeights(**f.loss.model_dump())
    return FitSettings(
        steps=steps, views=f.views if views is None else views, image_size=f.image_size, batch_rays=f.batch_rays,
        learning_rate=f.learning_rate, lr_decay=f.lr_decay, pretrain_steps=f.pretrain_steps, shrink=shrink,
        t_near=cfg.bounds.t_near, t_far=cfg.bounds.t_far, gamma=gamma, delta_min=delta_min,
        N=cfg.render.N, M=cfg.render.M, m_s=cfg.render.m_s, tau=cfg.render.tau, fov_deg=cfg.camera.fov_deg,
        pose=cfg.pose_distribution(), weights=weights, normal_points=f.normal_points, eval_every=f.eval_every,
        eval_views=f.eval_views, latent_dim=f.latent_dim, n_layers=f.n_layers, width=f.width, omega0=f.omega0,
        input_scale=f.input_scale, seed=cfg.seed, progressive=tuple(f.progressive),
    )


def cmd_fit(args) -> int:
    cfg = _config(args)
    target = cfg.build_field(_base_dir(args)) if args.config else default_target()
    if not isinstance(target, AnalyticField):
        raise ConfigurationError("field: fit needs an analytic target field")
    settings = fit_settings(cfg, args.steps, args.views, not args.no_shrink)
    if args.progressive:
        try:
            sizes = tuple(int(v) for v in args.progressive.split(","))
        except ValueError:
            raise ConfigurationError(f"--progressive: expected comma-separated integers, got {args.progressive!r}")
        if any(v < 2 for v in sizes):
            raise ConfigurationError("--progressive: image sizes must be at least 2")
        settings = replace(settings, progressive=sizes)
    if args.log:
        Path(args.log).write_text("")

    def on_checkpoint(step, record):
        _emit_json({"event": "checkpoint", "shrink": settings.shrink, **record}, args.log)

    try:
        result = fit(settings, target, on_checkpoint)
    except OccufieldError as exc:
        _emit_json({"event": "error", "error": type(exc).__name__, "message": str(exc)}, args.log)
        raise
    result.field.save(args.out)
    return 0


# -- schedule / budget -------------------------------------------------------------------


def schedule_rows(schedule: ShrinkSchedule, max_step: int, stride: int):
    steps = list(range(0, max_step + 1, stride))
    if steps[-1] != max_step:
        steps.append(max_step)
    return [(n, schedule.delta(n)) for n in steps]


def cmd_schedule(args) -> int:
    cfg = _config(args)
    schedule = cfg.shrink_schedule()
    if args.max_step < 0:
        raise ConfigurationError("--max-step must be >= 0")
    stride = args.stride or max(1, math.ceil(args.max_step / 20))
    print("n,delta")
    for n, d in schedule_rows(schedule, args.max_step, stride):
        print(f"{n},{d!r}")
    return 0


def cmd_budget(args) -> int:
    for name, v in (("M", args.M), ("ms", args.ms), ("N", args.N)):
        if v < (0 if name == "ms" else 1):
            raise ConfigurationError(f"--{name} must be a {'non-negative' if name == 'ms' else 'positive'} integer")
    b = {mode: query_budget(args.M, args.ms, args.N, mode) for mode in BUDGET_MODES}
    if args.json:
        print(json.dumps({"M": args.M, "m_s": args.ms, "N": args.N, **b}, sort_keys=True))
    else:
        print("mode,formula,queries")
        for mode, formula in zip(BUDGET_MODES, ("M+m_s+N", "M+m_s+1", "2N")):
            print(f"{mode},{formula},{b[mode]}")
    return 0


# -- extract -----------------------------------------------------------------------------


def cmd_extract(args) -> int:
    cfg = _config(args)
    field = cfg.build_field(_base_dir(args))
    latent = _latent(cfg, field, args.latent_seed)
    res = args.resolution or cfg.extract.resolution
    mesh = marching_cubes(field, latent, (cfg.extract.lower, cfg.extract.upper), res, cfg.render.tau)
    write_obj(mesh, args.out)
    if mesh.empty:
        log.warning("no alpha = %g crossing inside the extraction bounds; wrote an empty mesh", cfg.render.tau)
    else:
        log.info("%d vertices, %d faces, Euler characteristic %d", len(mesh.vertices), len(mesh.faces),
                 euler_characteristic(mesh))
    return 0


# -- verify ------------------------------------------------------------------------------


def _rootfind_target(field):
    if isinstance(field, AnalyticField) and field.kind in ("sphere", "box"):
        return field
    return AnalyticField.sphere(radius=0.08, sharpness=200.0)


def cmd_verify(args) -> int:
    cfg = _config(args)
    field = cfg.build_field(_base_dir(args))
    suites = ("rootfind", "equivalence", "gradients") if args.suite == "all" else (args.suite,)
    results = []
    for name in suites:
        if name == "rootfind":
            r = cfg.render
            res = rootfind_suite(_rootfind_target(field), args.rays, cfg.seed, r.M, r.m_s, r.tau,
                                 t_near=cfg.bounds.t_near, t_far=cfg.bounds.t_far)
        elif name == "equivalence":
            if isinstance(field, FilmSirenField):
                eq_field, latent = field, _latent(cfg, field, None)
            else:
                latent = cfg.latent_code(16)
                eq_field = certified_field(latent, cfg.seed)
            rng = np.random.default_rng(cfg.seed)
            rays = random_rays_toward(rng, args.rays, np.zeros(3), 0.1, cfg.camera.radius, cfg.bounds.t_near,
                                      cfg.bounds.t_far)
            res = equivalence_suite(eq_field, rays, latent, (0.1, 0.03, 0.01), cfg.render.N, cfg.seed)
        else:
            res = gradient_suite(args.probes, cfg.seed)
        results.append(res)
        _emit_json(res.as_dict(), args.out)
    return 0 if all(r.passed for r in results) else 1


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occufield", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON scene configuration")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default: logical cores; {THREADS_ENV} overrides)")
        return p

    p = common(sub.add_parser("render", help="render an image"))
    p.add_argument("--mode", choices=("alpha_cumulative", "surface_only", "density_cumulative"))
    p.add_argument("--out", required=True, help="output image (.ppm or .png)")
    p.add_argument("--latent-seed", type=int, default=None)
    p.add_argument("--step", type=int, default=None, help="schedule step (default: end of schedule)")
    p.add_argument("--full-volume", action="store_true", help="sample the whole ray instead of the window")
    p.add_argument("--diagnostics", help="append JSON diagnostics to this file ('-' for stdout)")
    p.set_defaults(func=cmd_render)

    p = common(sub.add_parser("fit", help="toy multi-view fit of a neural field"))
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--no-shrink", action="store_true", help="keep the window at its initial width")
    p.add_argument("--progressive", help="comma-separated image sizes trained before the final size, e.g. 16,24")
    p.add_argument("--log", help="JSON-lines metric log")
    p.add_argument("--out", default="checkpoint.bin", help="checkpoint path")
    p.set_defaults(func=cmd_fit)

    p = common(sub.add_parser("schedule", help="print the shrink schedule"))
    p.add_argument("--max-step", type=int, default=100_000)
    p.add_argument("--stride", type=int, default=None)
    p.set_defaults(func=cmd_schedule)

    p = common(sub.add_parser("budget", help="field queries per ray"), config=False)
    p.add_argument("--M", type=int, default=12)
    p.add_argument("--ms", type=int, default=3)
    p.add_argument("--N", type=int, default=12)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_budget)

    p = common(sub.add_parser("extract", help="export the iso-surface as OBJ"))
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--latent-seed", type=int, default=None)
    p.set_defaults(func=cmd_extract)

    p = common(sub.add_parser("verify", help="run self-check suites"))
    p.add_argument("--suite", choices=("equivalence", "rootfind", "gradients", "all"), default="all")
    p.add_argument("--rays", type=int, default=1000)
    p.add_argument("--probes", type=int, default=500)
    p.add_argument("--out", help="append JSON results to this file instead of stdout")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except OccufieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

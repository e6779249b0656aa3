"""JSON scene configuration with dataset presets."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field as PField, ValidationError, model_validator

from .exceptions import ConfigurationError
from .field import AnalyticField, ColorFunction, ConstantField, FilmSirenField
from .loss import LossWeights
from .render import RenderConfig
from .sampling import Camera, PoseDistribution, ShrinkSchedule, camera_from_angles

# Dataset-dependent hyperparameter presets.
PRESETS = {
    "bfm": {
        "bounds": {"t_near": 0.88, "t_far": 1.12},
        "schedule": {"gamma": 4.0e-5, "delta_min": 0.01},
        "loss": {"lambda_normal": 0.002, "lambda_opac_init": 0.1, "gamma_opac": 4.0e-5},
        "pose": {"kind": "gaussian", "sigma_v": 0.155, "sigma_h": 0.3},
    },
    "celeba": {
        "bounds": {"t_near": 0.88, "t_far": 1.12},
        "schedule": {"gamma": 1.0e-5, "delta_min": 0.03},
        "loss": {"lambda_normal": 0.05, "lambda_opac_init": 0.01, "gamma_opac": 0.5e-5},
        "pose": {"kind": "gaussian", "sigma_v": 0.155, "sigma_h": 0.3},
    },
    "cats": {
        "bounds": {"t_near": 0.8, "t_far": 1.2},
        "schedule": {"gamma": 2.0e-5, "delta_min": 0.1},
        "loss": {"lambda_normal": 0.05, "lambda_opac_init": 0.02, "gamma_opac": 1.0e-5},
        "pose": {"kind": "uniform", "sigma_v": 0.4, "sigma_h": 0.5},
    },
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Vec3 = tuple[float, float, float]


class ColorSpec(_Strict):
    kind: Literal["constant", "ramp", "palette"] = "constant"
    base: Vec3 = (0.8, 0.6, 0.4)
    gradient: Optional[tuple[Vec3, Vec3, Vec3]] = None
    origin: Vec3 = (0.0, 0.0, 0.0)
    cell: float = PField(0.05, gt=0)
    seed: int = 0

    def build(self) -> ColorFunction:
        return ColorFunction(self.kind, self.base, self.gradient, self.origin, self.cell, self.seed)


class AnalyticSpec(_Strict):
    kind: Literal["analytic"] = "analytic"
    shape: Literal["sphere", "box", "torus"] = "sphere"
    center: Vec3 = (0.0, 0.0, 0.0)
    radius: float = PField(0.08, gt=0)
    half_extents: Vec3 = (0.06, 0.06, 0.06)
    major: float = PField(0.06, gt=0)
    minor: float = PField(0.02, gt=0)
    sharpness: float = PField(200.0, gt=0)
    color: ColorSpec = ColorSpec()

    def build(self, base_dir=None):
        return AnalyticField(self.shape, self.center, self.radius, self.half_extents, self.major, self.minor,
                             sharpness=self.sharpness, color=self.color.build())


class ConstantSpec(_Strict):
    kind: Literal["constant"]
    alpha: float = PField(0.5, ge=0, le=1)
    color: Vec3 = (0.5, 0.5, 0.5)

    def build(self, base_dir=None):
        return ConstantField(self.alpha, self.color)


class NeuralSpec(_Strict):
    kind: Literal["neural"]
    checkpoint: str

    def build(self, base_dir=None):
        path = Path(self.checkpoint)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        if not path.exists():
            raise ConfigurationError(f"field.checkpoint: file not found: {path}")
        return FilmSirenField.load(path)


class BoundsSpec(_Strict):
    t_near: float = PField(0.88, gt=0)
    t_far: float = 1.12

    @model_validator(mode="after")
    def _ordered(self):
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be < t_far")
        return self


class CameraSpec(_Strict):
    fov_deg: float = PField(12.0, gt=0, lt=180)
    width: int = PField(64, ge=1)
    height: int = PField(64, ge=1)
    radius: float = PField(1.0, gt=0)
    yaw: float = 0.0
    pitch: float = 0.0


class PoseSpec(_Strict):
    kind: Literal["gaussian", "uniform"] = "gaussian"
    sigma_v: float = PField(0.155, ge=0)
    sigma_h: float = PField(0.3, ge=0)


class RenderSpec(_Strict):
    N: int = PField(12, ge=1)
    M: int = PField(12, ge=2)
    m_s: int = PField(3, ge=0)
    tau: float = PField(0.5, gt=0, lt=1)
    mode: Literal["density_cumulative", "alpha_cumulative", "surface_only"] = "alpha_cumulative"
    normalize_weights: bool = True
    background: Vec3 = (1.0, 1.0, 1.0)
    n_fine: int = PField(0, ge=0)


class ScheduleSpec(_Strict):
    gamma: float = PField(4.0e-5, ge=0)
    delta_min: float = PField(0.01, gt=0)


class LossSpec(_Strict):
    lambda_normal: float = PField(0.002, ge=0)
    lambda_opac_init: float = PField(0.1, ge=0)
    gamma_opac: float = PField(4.0e-5, ge=0)
    lambda_opac_cap: float = PField(10.0, ge=0)
    lambda_r1: float = PField(10.0, ge=0)


class FitSpec(_Strict):
    steps: int = PField(2000, ge=0)
    views: int = PField(24, ge=1)
    image_size: int = PField(32, ge=2)
    batch_rays: int = PField(256, ge=1)
    learning_rate: float = PField(1e-3, gt=0)
    lr_decay: float = PField(0.1, gt=0, le=1)
    pretrain_steps: int = PField(600, ge=0)
    shrink_gamma: Optional[float] = PField(None, ge=0)
    shrink_delta_min: Optional[float] = PField(None, gt=0)
    latent_dim: int = PField(16, ge=0)
    n_layers: int = PField(3, ge=1)
    width: int = PField(48, ge=1)
    input_scale: float = PField(8.0, gt=0)
    omega0: float = PField(30.0, gt=0)
    normal_points: int = PField(32, ge=0)
    eval_every: int = PField(500, ge=0)
    eval_views: int = PField(4, ge=1)
    progressive: list[Annotated[int, PField(ge=2)]] = []
    loss: Optional[LossSpec] = None


class ExtractSpec(_Strict):
    lower: Vec3 = (-0.15, -0.15, -0.15)
    upper: Vec3 = (0.15, 0.15, 0.15)
    resolution: int = PField(64, ge=2)


class LatentSpec(_Strict):
    seed: int = 0
    truncation: float = PField(2.0, gt=0)


class SceneConfig(_Strict):
    """Validated scene description; see :func:`load_config`."""

    field: Union[AnalyticSpec, ConstantSpec, NeuralSpec] = PField(AnalyticSpec(), discriminator="kind")
    bounds: BoundsSpec = BoundsSpec()
    camera: CameraSpec = CameraSpec()
    pose: PoseSpec = PoseSpec()
    render: RenderSpec = RenderSpec()
    schedule: ScheduleSpec = ScheduleSpec()
    loss: LossSpec = LossSpec()
    fit: FitSpec = FitSpec()
    extract: ExtractSpec = ExtractSpec()
    latent: LatentSpec = LatentSpec()
    seed: int = 0
    preset: Optional[Literal["bfm", "celeba", "cats"]] = None

    # -- builders -------------------------------------------------------------------

    def build_field(self, base_dir=None):
        return self.field.build(base_dir)

    def render_config(self, mode=None) -> RenderConfig:
        r = self.render
        return RenderConfig(N=r.N, M=r.M, m_s=r.m_s, tau=r.tau, mode=mode or r.mode,
                            normalize_weights=r.normalize_weights, background=r.background,
                            t_near=self.bounds.t_near, t_far=self.bounds.t_far, n_fine=r.n_fine)

    def camera_obj(self) -> Camera:
        c = self.camera
        return camera_from_angles(c.yaw, c.pitch, c.radius, (0.0, 0.0, 0.0), c.fov_deg, c.width, c.height)

    def pose_distribution(self) -> PoseDistribution:
        return PoseDistribution(self.pose.kind, self.pose.sigma_v, self.pose.sigma_h, self.camera.radius)

    def shrink_schedule(self) -> ShrinkSchedule:
        return ShrinkSchedule.for_bounds(self.bounds.t_near, self.bounds.t_far, self.schedule.gamma,
                                         self.schedule.delta_min)

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.loss.model_dump())

    def latent_code(self, latent_dim: int, seed: int | None = None) -> np.ndarray:
        """Standard-normal latent clamped to +-truncation (empty for analytic fields)."""
        if latent_dim == 0:
            return np.zeros(0)
        rng = np.random.default_rng(self.latent.seed if seed is None else seed)
        t = self.latent.truncation
        return np.clip(rng.standard_normal(latent_dim), -t, t)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def expand_preset(raw: dict) -> dict:
    """Fill preset values under whatever the document sets explicitly."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a JSON object")
    name = raw.get("preset")
    if name is None:
        return raw
    if name not in PRESETS:
        raise ConfigurationError(f"preset: unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    return _merge(PRESETS[name], raw)


def _format_errors(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(text: str, source: str = "<config>") -> SceneConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    return config_from_dict(raw, source)


def config_from_dict(raw, source: str = "<config>") -> SceneConfig:
    try:
        return SceneConfig.model_validate(expand_preset(raw))
    except ValidationError as exc:
        raise ConfigurationError(f"{source}: {_format_errors(exc)}") from None


def load_config(path) -> SceneConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))

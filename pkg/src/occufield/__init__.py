"""Occupancy fields rendered by root finding and a shrinking sample window."""

from .exceptions import (
    ConfigurationError,
    DegenerateGradientError,
    DivergenceError,
    NumericError,
    OccufieldError,
    TapeStateError,
    VerificationError,
)
from .extract import IsoMesh, marching_cubes
from .field import AnalyticField, ColorFunction, ConstantField, DensityField, FilmSirenField
from .metrics import concentration, depth_variance, equivalence_report, psnr
from .render import RenderConfig, render_image, render_rays
from .rootfind import locate_surface, locate_surfaces, query_budget
from .sampling import Camera, PoseDistribution, Ray, RayBatch, ShrinkSchedule, generate_rays

__version__ = "0.1.0"

__all__ = [
    "AnalyticField",
    "Camera",
    "ColorFunction",
    "ConfigurationError",
    "ConstantField",
    "DegenerateGradientError",
    "DensityField",
    "DivergenceError",
    "FilmSirenField",
    "IsoMesh",
    "NumericError",
    "OccufieldError",
    "PoseDistribution",
    "Ray",
    "RayBatch",
    "RenderConfig",
    "ShrinkSchedule",
    "TapeStateError",
    "VerificationError",
    "concentration",
    "depth_variance",
    "equivalence_report",
    "generate_rays",
    "locate_surface",
    "locate_surfaces",
    "marching_cubes",
    "psnr",
    "query_budget",
    "render_image",
    "render_rays",
]

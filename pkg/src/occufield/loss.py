"""Training objectives: adversarial terms, surface priors and their schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._validation import as_points, check_images, check_latent
from .exceptions import NumericError
from .field import DEGENERATE_GRADIENT
from .render import ALPHA_CLAMP

LAMBDA_OPACITY_CAP = 10.0
NORMAL_EPSILON = 0.01
# Keeps d sqrt(s)/ds finite when two normals coincide exactly.
_NORM_FLOOR = 1e-24


def gan_softplus(u):
    """``f(u) = -log(1 + exp(-u))``, stable for large |u| and tape-aware."""
    return ad.neg(ad.softplus(ad.neg(_arr(u))))


def _arr(x):
    return x if isinstance(x, ad.Var) else np.asarray(x, dtype=np.float64)


def origin_loss(d_fake, d_real, r1=0.0):
    """Adversarial objective as a batch mean over the supplied scores.

    ``mean f(D(G(z))) + mean f(-D(I)) + r1`` where ``r1`` is the (already
    batch-averaged) gradient penalty.  The discriminator ascends this value
    and the generator descends it.
    """
    return ad.mean(gan_softplus(d_fake)) + ad.mean(gan_softplus(ad.neg(_arr(d_real)))) + r1


def generator_loss(d_fake):
    """Non-saturating generator loss ``mean softplus(-D(G(z)))``."""
    return ad.mean(ad.softplus(ad.neg(_arr(d_fake))))


def r1_penalty(discriminator_fn, real_input, lam: float = 10.0) -> float:
    """``lam * |grad_I D(I)|^2`` using reverse-mode input gradients.

    ``discriminator_fn`` maps an array (or tape variable) to a scalar.
    """
    tape = ad.Tape()
    x = tape.variable(np.asarray(real_input, dtype=np.float64))
    out = discriminator_fn(x)
    if not isinstance(out, ad.Var):
        if not np.all(np.isfinite(out)):
            raise NumericError("discriminator output is not finite")
        return 0.0
    g = ad.grad_wrt_input(tape, ad.sum(out), x)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite discriminator input gradient")
    return float(lam * np.sum(g * g))


def random_offsets(rng, n: int, radius: float = NORMAL_EPSILON) -> np.ndarray:
    """``n`` vectors uniform on the sphere of the given radius."""
    v = rng.standard_normal((n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class NormalTerm:
    value: object
    used: int
    skipped: int


def _gradients(field, points, z, network):
    if network is not None:
        return network.alpha_and_gradient(points)[1]
    return np.asarray(field.alpha_gradient(points, z), dtype=np.float64).T


def normal_term(field, surface_points, latent=None, epsilon=NORMAL_EPSILON, rng=None, network=None,
                offsets=None) -> NormalTerm:
    """Normal smoothness prior with diagnostics.

    Sums ``|n(x) - n(x + eps)|`` over surface points, with ``eps`` uniform on
    a sphere of radius ``epsilon``.  Passing ``network`` (a tape-bound
    FilmSiren network) makes the value a tape variable differentiable in the
    parameters.  Points where either gradient norm is below 1e-12 are
    skipped and counted.
    """
    x = as_points(surface_points, "surface_points") if np.size(surface_points) else np.zeros((0, 3))
    z = check_latent(latent, field.latent_dim)
    if x.shape[0] == 0:
        return NormalTerm(0.0, 0, 0)
    if offsets is None:
        offsets = random_offsets(rng if rng is not None else np.random.default_rng(0), x.shape[0], epsilon)
    g1 = _gradients(field, x, z, network)
    g2 = _gradients(field, x + offsets, z, network)
    n1 = np.sqrt(np.sum(ad.value_of(g1) ** 2, axis=0))
    n2 = np.sqrt(np.sum(ad.value_of(g2) ** 2, axis=0))
    keep = np.flatnonzero((n1 >= DEGENERATE_GRADIENT) & (n2 >= DEGENERATE_GRADIENT))
    skipped = x.shape[0] - keep.size
    if keep.size == 0:
        return NormalTerm(0.0, 0, skipped)
    cols = (slice(None), keep)
    g1, g2 = ad.take(g1, cols), ad.take(g2, cols)
    u1 = g1 / ad.sqrt(ad.sum(g1 * g1, axis=0))
    u2 = g2 / ad.sqrt(ad.sum(g2 * g2, axis=0))
    diff = u1 - u2
    value = ad.sum(ad.sqrt(ad.sum(diff * diff, axis=0) + _NORM_FLOOR))
    if not isinstance(value, ad.Var):
        value = float(value)
    return NormalTerm(value, keep.size, skipped)


def normal_regularizer(field, surface_points, latent=None, epsilon=NORMAL_EPSILON, rng=None, network=None,
                       offsets=None):
    return normal_term(field, surface_points, latent, epsilon, rng, network, offsets).value


def opacity_regularizer(alphas):
    """``mean(log a + log(1 - a))`` after clamping to [1e-7, 1 - 1e-7].

    Largest at a = 0.5; adding it with a positive weight to a minimised
    objective pushes alphas toward 0 or 1.
    """
    a = ad.clip(alphas, ALPHA_CLAMP, 1.0 - ALPHA_CLAMP)
    return ad.mean(ad.log(a) + ad.log(1.0 - a))


@dataclass(frozen=True)
class LossWeights:
    lambda_normal: float = 0.002
    lambda_opac_init: float = 0.1
    gamma_opac: float = 4.0e-5
    lambda_opac_cap: float = LAMBDA_OPACITY_CAP
    lambda_r1: float = 10.0

    def __post_init__(self):
        for name in ("lambda_normal", "lambda_opac_init", "gamma_opac", "lambda_opac_cap", "lambda_r1"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def lambda_opacity(self, n) -> float:
        """``min(lambda_opac_init * exp(n * gamma_opac), cap)``."""
        if n < 0:
            raise ValueError("step must be >= 0")
        if self.lambda_opac_init == 0.0 or self.lambda_opac_cap == 0.0:
            return 0.0
        # Compare in log space so huge step counts cannot overflow exp.
        if n * self.gamma_opac >= math.log(self.lambda_opac_cap / self.lambda_opac_init):
            return self.lambda_opac_cap
        return self.lambda_opac_init * math.exp(n * self.gamma_opac)


def total_loss(origin, normal, opacity, weights: LossWeights, step: int):
    """``origin + lambda_normal * normal + lambda_opacity(step) * opacity``."""
    return origin + weights.lambda_normal * normal + weights.lambda_opacity(step) * opacity


def reconstruction_loss(rendered, reference):
    """Mean squared error over all pixels and channels."""
    ref = np.asarray(reference, dtype=np.float64)
    if isinstance(rendered, ad.Var):
        if rendered.shape != ref.shape:
            raise ValueError(f"image shapes differ: {rendered.shape} vs {ref.shape}")
        diff = rendered - ref
        return ad.mean(diff * diff)
    a, b = check_images(rendered, ref)
    return float(np.mean((a - b) ** 2))

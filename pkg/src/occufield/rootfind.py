"""First free-to-occupied crossing of alpha along rays.

A scan over ``M`` equal bins finds the first bin whose near edge is free
(alpha < tau) and whose far edge is occupied (alpha >= tau).  The bracket is
then tightened by ``m_s`` secant evaluations that keep the bracket (false
position with the Illinois correction: when the same end survives twice, its
residual is halved so a steep logistic profile cannot pin one end).  A
proposal outside the bracket or a vanishing secant slope falls back to
bisection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_latent, check_positive_int
from .exceptions import NumericError
from .sampling import Ray, RayBatch

TOL_ALPHA = 1e-3
TOL_T = 1e-6
_FLAT_SECANT = 1e-12

BUDGET_MODES = ("cumulative", "surface_only", "hierarchical_baseline")


@dataclass(frozen=True)
class SurfaceHit:
    found: bool
    t_s: float
    bin_index: int
    queries_used: int
    bracket: tuple = (np.nan, np.nan)


@dataclass(frozen=True)
class SurfaceHits:
    """Batched :class:`SurfaceHit`; ``t_s`` is NaN and ``bin_index`` -1 on misses."""

    found: np.ndarray
    t_s: np.ndarray
    bin_index: np.ndarray
    queries_used: np.ndarray
    bracket_lo: np.ndarray
    bracket_hi: np.ndarray

    def __len__(self):
        return self.found.shape[0]

    def __getitem__(self, i) -> SurfaceHit:
        return SurfaceHit(
            bool(self.found[i]),
            float(self.t_s[i]),
            int(self.bin_index[i]),
            int(self.queries_used[i]),
            (float(self.bracket_lo[i]), float(self.bracket_hi[i])),
        )


def first_crossing(alphas, tau: float) -> np.ndarray:
    """Smallest k with ``alphas[k] < tau <= alphas[k+1]`` per row, else -1."""
    a = np.atleast_2d(np.asarray(alphas, dtype=np.float64))
    hit = (a[:, :-1] < tau) & (a[:, 1:] >= tau)
    return np.where(hit.any(axis=1), np.argmax(hit, axis=1), -1)


def _secant(lo, hi, a_lo, a_hi, tau):
    denom = a_hi - a_lo
    flat = np.abs(denom) < _FLAT_SECANT
    with np.errstate(divide="ignore", invalid="ignore"):
        prop = lo + (tau - a_lo) * (hi - lo) / np.where(flat, 1.0, denom)
    bad = flat | ~np.isfinite(prop) | (prop < lo) | (prop > hi)
    return np.where(bad, 0.5 * (lo + hi), prop)


def locate_surfaces(field, rays: RayBatch, latent=None, M: int = 12, m_s: int = 3, tau: float = 0.5,
                    tol_alpha: float = TOL_ALPHA, tol_t: float = TOL_T, alpha_fn=None) -> SurfaceHits:
    """Vectorised surface localisation for every ray in ``rays``.

    ``alpha_fn`` (points -> alphas) may be passed to reuse an already bound
    network; otherwise ``field.bind(latent)`` supplies it.
    """
    M = check_positive_int(M, "M", minimum=2)
    if m_s < 0:
        raise ValueError("m_s must be >= 0")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    if alpha_fn is None:
        alpha_fn = field.bind(check_latent(latent, field.latent_dim))[0]

    o, d = rays.origins, rays.directions
    n = o.shape[0]
    edges = np.linspace(rays.t_near, rays.t_far, M + 1)
    pts = o[:, None, :] + edges[None, :, None] * d[:, None, :]
    alphas = np.asarray(alpha_fn(pts.reshape(-1, 3)), dtype=np.float64).reshape(n, M + 1)
    bad = ~np.all(np.isfinite(alphas), axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise NumericError(f"non-finite alpha on ray {i}", ray=i)
    queries = np.full(n, M + 1, dtype=np.int64)

    k = first_crossing(alphas, tau)
    found = k >= 0
    kk = np.where(found, k, 0)
    rows = np.arange(n)
    lo, hi = edges[kk], edges[kk + 1]
    a_lo, a_hi = alphas[rows, kk], alphas[rows, kk + 1]
    t_s = np.full(n, np.nan)
    done = ~found
    last = np.zeros(n, dtype=np.int8)  # -1: lo moved last, +1: hi moved last

    for _ in range(m_s):
        active = np.flatnonzero(~done)
        if active.size == 0:
            break
        prop = _secant(lo[active], hi[active], a_lo[active], a_hi[active], tau)
        a_p = np.asarray(alpha_fn(o[active] + prop[:, None] * d[active]), dtype=np.float64)
        queries[active] += 1
        below = a_p < tau
        prev = last[active]
        lo[active] = np.where(below, prop, lo[active])
        a_lo[active] = np.where(below, a_p, np.where(prev == 1, tau + 0.5 * (a_lo[active] - tau), a_lo[active]))
        hi[active] = np.where(below, hi[active], prop)
        a_hi[active] = np.where(below, np.where(prev == -1, tau + 0.5 * (a_hi[active] - tau), a_hi[active]), a_p)
        last[active] = np.where(below, -1, 1)
        close = np.abs(a_p - tau) < tol_alpha
        t_s[active[close]] = prop[close]
        done[active[close]] = True
        done[active[hi[active] - lo[active] <= tol_t]] = True

    pending = found & np.isnan(t_s)
    t_s[pending] = _secant(lo[pending], hi[pending], a_lo[pending], a_hi[pending], tau)
    nan = np.full(n, np.nan)
    return SurfaceHits(
        found=found,
        t_s=t_s,
        bin_index=np.where(found, k, -1),
        queries_used=queries,
        bracket_lo=np.where(found, lo, nan),
        bracket_hi=np.where(found, hi, nan),
    )


def locate_surface(field, ray: Ray, latent=None, M: int = 12, m_s: int = 3, tau: float = 0.5,
                   **kwargs) -> SurfaceHit:
    return locate_surfaces(field, RayBatch.from_rays([ray]), latent, M, m_s, tau, **kwargs)[0]


def query_budget(M: int, m_s: int, N: int, mode: str) -> int:
    """Field queries per pixel for each rendering mode.

    ``cumulative``: M + m_s + N.  ``surface_only``: M + m_s + 1.
    ``hierarchical_baseline``: 2N (coarse plus fine passes).
    """
    if mode == "cumulative":
        return M + m_s + N
    if mode == "surface_only":
        return M + m_s + 1
    if mode == "hierarchical_baseline":
        return 2 * N
    raise ValueError(f"unknown budget mode {mode!r}; expected one of {BUDGET_MODES}")

"""Occupancy fields: analytic ground truth shapes and a FiLM-SIREN network.

Every field maps batched positions (n, 3) to occupancy ``alpha`` in [0, 1]
and positions plus view directions to RGB colour in [0, 1].  Latent codes
condition neural fields; analytic fields declare ``latent_dim = 0``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._validation import as_points, check_latent, check_unit_vectors, check_vector3
from .exceptions import ConfigurationError, DegenerateGradientError

DEGENERATE_GRADIENT = 1e-12

_MAGIC = b"OFNF"
_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class FieldQuery:
    position: np.ndarray
    view_direction: np.ndarray
    latent: np.ndarray = dc_field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "position", check_vector3(self.position, "position"))
        d = check_unit_vectors(self.view_direction, "view_direction")[0]
        object.__setattr__(self, "view_direction", d)
        object.__setattr__(self, "latent", np.asarray(self.latent, dtype=np.float64).reshape(-1))


@dataclass(frozen=True)
class FieldOutput:
    alpha: float
    color: np.ndarray


class Field:
    """Base class.  Subclasses implement ``alpha``, ``color`` and ``alpha_gradient``."""

    latent_dim = 0

    def alpha(self, points, latent=None) -> np.ndarray:
        raise NotImplementedError

    def color(self, points, directions, latent=None) -> np.ndarray:
        raise NotImplementedError

    def alpha_gradient(self, points, latent=None) -> np.ndarray:
        """Spatial gradient of alpha at each point, shape (n, 3)."""
        raise NotImplementedError

    def color_lipschitz(self, latent=None) -> float:
        """Upper bound on the per-channel Lipschitz constant of colour in position."""
        return float("inf")

    def bind(self, latent=None):
        """Return ``(alpha_fn, color_fn)`` closures with the latent fixed."""
        z = check_latent(latent, self.latent_dim)
        return (lambda p: self.alpha(p, z)), (lambda p, d: self.color(p, d, z))


def evaluate(field: Field, query: FieldQuery) -> FieldOutput:
    z = check_latent(query.latent, field.latent_dim)
    p = query.position[None, :]
    alpha = float(field.alpha(p, z)[0])
    color = np.asarray(field.color(p, query.view_direction[None, :], z)[0], dtype=np.float64)
    return FieldOutput(alpha=alpha, color=color)


def evaluate_alpha_gradient(field: Field, position, latent=None) -> np.ndarray:
    """Gradient of alpha at one position.

    Raises :class:`DegenerateGradientError` when its norm is below 1e-12, so
    callers can pick their own fallback (the normal map renders a miss).
    """
    p = check_vector3(position, "position")
    z = check_latent(latent, field.latent_dim)
    g = np.asarray(field.alpha_gradient(p[None, :], z)[0], dtype=np.float64)
    if not np.linalg.norm(g) >= DEGENERATE_GRADIENT:
        raise DegenerateGradientError(f"alpha gradient norm {np.linalg.norm(g):.3g} at {p.tolist()}")
    return g


def _logistic(x):
    return ad.logistic(np.asarray(x, dtype=np.float64))


# -- analytic fields -----------------------------------------------------------


class ColorFunction:
    """Position-dependent colour for analytic fields.

    ``constant``: a fixed RGB.  ``ramp``: ``base + gradient @ (x - origin)``
    clipped to [0, 1].  ``palette``: a hashed lookup of the integer cell
    containing ``x``; discontinuous, so it has no Lipschitz bound.
    """

    def __init__(self, kind="constant", base=(0.8, 0.6, 0.4), gradient=None, origin=(0, 0, 0), cell=0.05, seed=0):
        if kind not in ("constant", "ramp", "palette"):
            raise ConfigurationError(f"unknown colour kind {kind!r}")
        self.kind = kind
        self.base = np.clip(check_vector3(base, "base colour"), 0.0, 1.0)
        self.gradient = np.zeros((3, 3)) if gradient is None else np.asarray(gradient, dtype=np.float64).reshape(3, 3)
        self.origin = check_vector3(origin, "colour origin")
        self.cell = float(cell)
        self.seed = int(seed)
        self._palette = np.random.default_rng(self.seed).uniform(0.1, 0.9, size=(16, 3))

    def __call__(self, points):
        points = as_points(points)
        if self.kind == "constant":
            return np.broadcast_to(self.base, points.shape).copy()
        if self.kind == "ramp":
            return np.clip(self.base + (points - self.origin) @ self.gradient.T, 0.0, 1.0)
        cells = np.floor(points / self.cell).astype(np.int64)
        h = (cells[:, 0] * 73856093) ^ (cells[:, 1] * 19349663) ^ (cells[:, 2] * 83492791)
        return self._palette[np.abs(h) % len(self._palette)]

    def lipschitz(self) -> float:
        if self.kind == "constant":
            return 0.0
        if self.kind == "ramp":
            return float(np.max(np.linalg.norm(self.gradient, axis=1)))
        return float("inf")


class AnalyticField(Field):
    """Ground-truth shape with ``alpha = logistic(k * inside_distance(x))``.

    ``inside_distance`` is the negated signed distance (positive inside), so
    alpha is exactly 0.5 on the surface and Lipschitz with constant k/4.

    Shapes: ``sphere`` (center, radius), ``box`` (center, half_extents),
    ``torus`` (center, major, minor; ring in the xy-plane) and ``union``
    (two child fields; their sharpness is ignored in favour of this one's).
    """

    KINDS = ("sphere", "box", "torus", "union")

    def __init__(self, kind="sphere", center=(0.0, 0.0, 0.0), radius=1.0, half_extents=(0.5, 0.5, 0.5),
                 major=0.5, minor=0.15, children=(), sharpness=10.0, color=None):
        if kind not in self.KINDS:
            raise ConfigurationError(f"unknown shape kind {kind!r}; expected one of {self.KINDS}")
        if not sharpness > 0:
            raise ConfigurationError("sharpness must be positive")
        self.kind = kind
        self.center = check_vector3(center, "center")
        self.radius = float(radius)
        self.half_extents = check_vector3(half_extents, "half_extents")
        self.major = float(major)
        self.minor = float(minor)
        self.children = tuple(children)
        if kind == "union" and len(self.children) != 2:
            raise ConfigurationError("union needs exactly two children")
        self.sharpness = float(sharpness)
        self.color_fn = color if color is not None else ColorFunction()

    @classmethod
    def sphere(cls, center=(0.0, 0.0, 0.0), radius=1.0, sharpness=10.0, color=None):
        return cls("sphere", center=center, radius=radius, sharpness=sharpness, color=color)

    @classmethod
    def box(cls, center=(0.0, 0.0, 0.0), half_extents=(0.5, 0.5, 0.5), sharpness=10.0, color=None):
        return cls("box", center=center, half_extents=half_extents, sharpness=sharpness, color=color)

    def inside_distance(self, points) -> np.ndarray:
        return self._distance_and_gradient(as_points(points))[0]

    def _distance_and_gradient(self, p):
        q = p - self.center
        if self.kind == "sphere":
            r = np.linalg.norm(q, axis=1)
            safe = np.where(r > 0, r, 1.0)[:, None]
            return self.radius - r, -np.where(r[:, None] > 0, q / safe, 0.0)
        if self.kind == "box":
            return self._box(q)
        if self.kind == "torus":
            rho = np.linalg.norm(q[:, :2], axis=1)
            u = np.where(rho[:, None] > 0, q[:, :2] / np.where(rho > 0, rho, 1.0)[:, None], 0.0)
            a = rho - self.major
            b = q[:, 2]
            n = np.hypot(a, b)
            safe = np.where(n > 0, n, 1.0)
            grad_sdf = np.column_stack([u * (a / safe)[:, None], b / safe])
            return self.minor - n, -grad_sdf
        d0, g0 = self.children[0]._distance_and_gradient(p)
        d1, g1 = self.children[1]._distance_and_gradient(p)
        first = d0 >= d1
        return np.where(first, d0, d1), np.where(first[:, None], g0, g1)

    def _box(self, q):
        s = np.where(q >= 0, 1.0, -1.0)
        excess = np.abs(q) - self.half_extents
        outside = np.maximum(excess, 0.0)
        out_norm = np.linalg.norm(outside, axis=1)
        inner = np.minimum(np.max(excess, axis=1), 0.0)
        sdf = out_norm + inner
        grad = np.zeros_like(q)
        is_out = out_norm > 0
        grad[is_out] = s[is_out] * outside[is_out] / out_norm[is_out, None]
        axis = np.argmax(excess, axis=1)
        rows = np.flatnonzero(~is_out)
        grad[rows, axis[rows]] = s[rows, axis[rows]]
        return -sdf, -grad

    def alpha(self, points, latent=None):
        check_latent(latent, 0)
        return _logistic(self.sharpness * self.inside_distance(points))

    def alpha_gradient(self, points, latent=None):
        check_latent(latent, 0)
        d, grad_d = self._distance_and_gradient(as_points(points))
        a = _logistic(self.sharpness * d)
        return (self.sharpness * a * (1.0 - a))[:, None] * grad_d

    def color(self, points, directions, latent=None):
        check_latent(latent, 0)
        return self.color_fn(points)

    def color_lipschitz(self, latent=None):
        return self.color_fn.lipschitz()

    def alpha_lipschitz(self) -> float:
        return self.sharpness / 4.0


class ConstantField(Field):
    """Uniform alpha and colour; its spatial gradient is identically zero."""

    def __init__(self, alpha=0.5, color=(0.5, 0.5, 0.5)):
        self.value = float(alpha)
        self.rgb = check_vector3(color, "color")

    def alpha(self, points, latent=None):
        return np.full(as_points(points).shape[0], self.value)

    def color(self, points, directions, latent=None):
        return np.tile(self.rgb, (as_points(points).shape[0], 1))

    def alpha_gradient(self, points, latent=None):
        return np.zeros_like(as_points(points))

    def color_lipschitz(self, latent=None):
        return 0.0


class PlaneRampField(Field):
    """Alpha affine in position, ``clip(offset + slope . x, 0, 1)``.

    Used as an exact target for secant refinement and as a field with
    constant normals.
    """

    def __init__(self, slope=(0.0, 0.0, 1.0), offset=0.0, color=(0.5, 0.5, 0.5)):
        self.slope = check_vector3(slope, "slope")
        self.offset = float(offset)
        self.rgb = check_vector3(color, "color")

    def alpha(self, points, latent=None):
        return np.clip(self.offset + as_points(points) @ self.slope, 0.0, 1.0)

    def color(self, points, directions, latent=None):
        return np.tile(self.rgb, (as_points(points).shape[0], 1))

    def alpha_gradient(self, points, latent=None):
        p = as_points(points)
        raw = self.offset + p @ self.slope
        inside = ((raw > 0) & (raw < 1))[:, None]
        return np.where(inside, self.slope, 0.0)

    def color_lipschitz(self, latent=None):
        return 0.0


class DensityField:
    """Volume density induced by an alpha field at a nominal spacing.

    ``sigma(x) = -log(1 - alpha(x)) / spacing``, so compositing this density
    with inter-sample distance ``spacing`` reproduces the source alphas.
    """

    def __init__(self, source: Field, spacing: float, alpha_cap=1.0 - 1e-7):
        if not spacing > 0:
            raise ValueError("spacing must be positive")
        self.source = source
        self.spacing = float(spacing)
        self.alpha_cap = alpha_cap
        self.latent_dim = source.latent_dim

    def density(self, points, latent=None):
        a = np.minimum(self.source.alpha(points, latent), self.alpha_cap)
        return -np.log1p(-a) / self.spacing

    def color(self, points, directions, latent=None):
        return self.source.color(points, directions, latent)


# -- FiLM-SIREN ------------------------------------------------------------------

MAPPING_HIDDEN = 256
MAPPING_DEPTH = 3


def _layout(latent_dim, n_layers, width):
    shapes = []
    fan_in = latent_dim
    for i in range(MAPPING_DEPTH):
        shapes += [(f"map{i}.w", (MAPPING_HIDDEN, fan_in)), (f"map{i}.b", (MAPPING_HIDDEN,))]
        fan_in = MAPPING_HIDDEN
    shapes += [("map_out.w", (2 * n_layers * width, MAPPING_HIDDEN)), ("map_out.b", (2 * n_layers * width,))]
    fan_in = 3
    for i in range(n_layers):
        shapes += [(f"layer{i}.w", (width, fan_in)), (f"layer{i}.b", (width,))]
        fan_in = width
    shapes += [("alpha.w", (1, width)), ("alpha.b", (1,))]
    shapes += [("color.w", (3, width + 3)), ("color.b", (3,))]
    layout, offset = {}, 0
    for name, shape in shapes:
        layout[name] = (offset, shape)
        offset += int(np.prod(shape))
    return layout, offset


def parameter_count(latent_dim: int, n_layers: int, width: int) -> int:
    return _layout(latent_dim, n_layers, width)[1]


class _Network:
    """Weights of a FilmSirenField bound to one latent, optionally on a tape."""

    def __init__(self, owner: "FilmSirenField", latent, tape=None):
        self.owner = owner
        self.tape = tape
        flat = owner.params
        self.flat = tape.parameter(flat) if tape is not None else flat
        self.w = {name: ad.flat_slice(self.flat, off, shape) for name, (off, shape) in owner.layout.items()}
        z = check_latent(latent, owner.latent_dim)[None, :]
        h = z
        for i in range(MAPPING_DEPTH):
            h = ad.leaky_relu(ad.affine(h, self.w[f"map{i}.w"], self.w[f"map{i}.b"]))
        out = ad.affine(h, self.w["map_out.w"], self.w["map_out.b"])
        lw = owner.n_layers * owner.width
        self.freqs = [ad.take(out, (0, slice(l * owner.width, (l + 1) * owner.width))) for l in range(owner.n_layers)]
        self.phases = [
            ad.take(out, (0, slice(lw + l * owner.width, lw + (l + 1) * owner.width))) for l in range(owner.n_layers)
        ]

    def features(self, x):
        h = x
        for l in range(self.owner.n_layers):
            pre = ad.affine(h, self.w[f"layer{l}.w"], self.w[f"layer{l}.b"])
            h = ad.sin(pre * self.freqs[l] + self.phases[l])
        return h

    def alpha_from_features(self, h):
        logit = ad.affine(h, self.w["alpha.w"], self.w["alpha.b"])
        return ad.logistic(ad.take(logit, (slice(None), 0)))

    def color_from_features(self, h, directions):
        return ad.logistic(ad.affine(ad.concat([h, directions], axis=-1), self.w["color.w"], self.w["color.b"]))

    def alpha(self, x):
        return self.alpha_from_features(self.features(x))

    def color(self, x, directions):
        return self.color_from_features(self.features(x), directions)

    def alpha_and_gradient(self, x):
        """Alpha (n,) and its spatial gradient laid out as (3, n).

        The gradient is propagated forward with tangent arrays built from
        tape primitives, so it stays differentiable in the parameters.
        """
        n = np.shape(ad.value_of(x))[0]
        tangent = np.broadcast_to(np.eye(3)[:, None, :], (3, n, 3))
        h = x
        for l in range(self.owner.n_layers):
            w = self.w[f"layer{l}.w"]
            u = ad.affine(h, w, self.w[f"layer{l}.b"]) * self.freqs[l] + self.phases[l]
            tangent = (ad.cos(u) * self.freqs[l]) * ad.matmul(tangent, w)
            h = ad.sin(u)
        a = self.alpha_from_features(h)
        dlogit = ad.matmul(tangent, self.w["alpha.w"])
        grad = ad.reshape(dlogit, (3, n)) * (a * (1.0 - a))
        return a, grad


class FilmSirenField(Field):
    """FiLM-conditioned SIREN occupancy field.

    A leaky-ReLU mapping network (three hidden layers of 256 units) turns the
    latent into per-layer frequency and phase vectors.  Each backbone layer
    computes ``sin(freq * (W h + b) + phase)``.  The alpha head reads only
    the final features; the colour head also reads the raw view direction.
    Both heads end in a logistic.

    All parameters live in one flat float64 vector ``params``.
    """

    def __init__(self, latent_dim=16, n_layers=4, width=64, params=None):
        self.latent_dim = int(latent_dim)
        self.n_layers = int(n_layers)
        self.width = int(width)
        self.layout, n = _layout(self.latent_dim, self.n_layers, self.width)
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params)
        if params.shape != (n,):
            raise ConfigurationError(f"expected {n} parameters, got {params.shape}")
        self.params = params

    @classmethod
    def initialize(cls, latent_dim=16, n_layers=4, width=64, seed=0, omega0=30.0, input_scale=1.0,
                   dtype=np.float64):
        """Sinusoidal-network initialisation.

        First-layer weights are uniform in +-1/fan_in (times ``input_scale``,
        which rescales scene coordinates), later layers in
        +-sqrt(6/fan_in)/omega0.  The mapping network's frequency outputs are
        biased to ``omega0`` so the backbone starts at the usual SIREN scale.
        """
        field = cls(latent_dim, n_layers, width)
        rng = np.random.default_rng(seed)
        p = np.zeros(field.n_params)

        def put(name, values):
            off, shape = field.layout[name]
            p[off:off + int(np.prod(shape))] = np.asarray(values).reshape(-1)

        fan_in = latent_dim
        gain = np.sqrt(2.0 / (1.0 + 0.2**2))
        for i in range(MAPPING_DEPTH):
            put(f"map{i}.w", rng.normal(0.0, gain / np.sqrt(max(fan_in, 1)), (MAPPING_HIDDEN, fan_in)))
            fan_in = MAPPING_HIDDEN
        lw = n_layers * width
        put("map_out.w", 0.25 * rng.normal(0.0, gain / np.sqrt(MAPPING_HIDDEN), (2 * lw, MAPPING_HIDDEN)))
        put("map_out.b", np.concatenate([np.full(lw, omega0), np.zeros(lw)]))

        fan_in = 3
        for l in range(n_layers):
            bound = 1.0 / fan_in if l == 0 else np.sqrt(6.0 / fan_in) / omega0
            scale = input_scale if l == 0 else 1.0
            put(f"layer{l}.w", scale * rng.uniform(-bound, bound, (width, fan_in)))
            put(f"layer{l}.b", rng.uniform(-1.0, 1.0, width) / np.sqrt(fan_in))
            fan_in = width
        bound = np.sqrt(6.0 / width) / omega0
        put("alpha.w", rng.uniform(-bound, bound, (1, width)))
        put("color.w", rng.uniform(-bound, bound, (3, width + 3)))
        field.params = p.astype(dtype)
        return field

    @property
    def n_params(self) -> int:
        return parameter_count(self.latent_dim, self.n_layers, self.width)

    def copy(self) -> "FilmSirenField":
        return FilmSirenField(self.latent_dim, self.n_layers, self.width, self.params.copy())

    def weights(self, name) -> np.ndarray:
        off, shape = self.layout[name]
        return self.params[off:off + int(np.prod(shape))].reshape(shape)

    def network(self, latent, tape=None) -> _Network:
        return _Network(self, latent, tape)

    def bind(self, latent=None):
        net = self.network(latent)
        return net.alpha, net.color

    def alpha(self, points, latent=None):
        return self.network(latent).alpha(as_points(points))

    def color(self, points, directions, latent=None):
        return self.network(latent).color(as_points(points), as_points(directions, "directions"))

    def alpha_gradient(self, points, latent=None):
        """Reverse-mode gradient of alpha with respect to each position."""
        tape = ad.Tape()
        x = tape.variable(as_points(points))
        net = _Network(self, latent)
        total = ad.sum(net.alpha(x))
        return ad.grad_wrt_input(tape, total, x)

    def color_lipschitz(self, latent=None) -> float:
        """Product of layer operator norms: a certified colour Lipschitz bound."""
        freqs, _ = run_mapping_network(self, latent)
        bound = 1.0
        for l in range(self.n_layers):
            bound *= np.linalg.norm(freqs[l][:, None] * self.weights(f"layer{l}.w"), 2)
        head = self.weights("color.w")[:, : self.width]
        return float(bound * 0.25 * np.max(np.linalg.norm(head, axis=1)))

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(_MAGIC, _VERSION, self.latent_dim, self.n_layers)
        return header + np.asarray(self.params, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FilmSirenField":
        if len(blob) < _HEADER.size:
            raise ConfigurationError("checkpoint truncated")
        magic, version, latent_dim, n_layers = _HEADER.unpack_from(blob)
        if magic != _MAGIC or version != _VERSION:
            raise ConfigurationError(f"not an occupancy-field checkpoint (magic={magic!r}, version={version})")
        payload = blob[_HEADER.size:]
        if len(payload) % 8:
            raise ConfigurationError("checkpoint payload is not a whole number of float64 values")
        count = len(payload) // 8
        width = _infer_width(latent_dim, n_layers, count)
        params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        return cls(latent_dim, n_layers, width, params)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FilmSirenField":
        return cls.from_bytes(Path(path).read_bytes())


def _infer_width(latent_dim, n_layers, count):
    width = 1
    while True:
        n = parameter_count(latent_dim, n_layers, width)
        if n == count:
            return width
        if n > count:
            raise ConfigurationError(f"{count} parameters match no width for Dz={latent_dim}, L={n_layers}")
        width += 1


def run_mapping_network(field: FilmSirenField, latent) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer (frequencies, phases), each of shape (n_layers, width)."""
    net = field.network(latent)
    return np.stack(net.freqs), np.stack(net.phases)

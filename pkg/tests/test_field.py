import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from occufield.exceptions import ConfigurationError, DegenerateGradientError
from occufield.field import (
    AnalyticField,
    ColorFunction,
    ConstantField,
    DensityField,
    FieldQuery,
    FilmSirenField,
    PlaneRampField,
    evaluate,
    evaluate_alpha_gradient,
    run_mapping_network,
)

coords = arrays(np.float64, (3,), elements=st.floats(-2.0, 2.0))


def test_sphere_center_and_surface(unit_sphere):
    out = evaluate(unit_sphere, FieldQuery((0, 0, 0), (0, 0, 1)))
    assert out.alpha == pytest.approx(1.0 / (1.0 + np.exp(-10.0)), abs=1e-15)
    assert out.alpha == pytest.approx(0.99995, abs=1e-5)
    assert evaluate(unit_sphere, FieldQuery((1, 0, 0), (0, 0, 1))).alpha == pytest.approx(0.5, abs=1e-12)


def test_evaluate_is_deterministic(tiny_net):
    z = np.linspace(-1, 1, 4)
    q = FieldQuery((0.1, -0.2, 0.05), (0, 0, -1), z)
    a, b = evaluate(tiny_net, q), evaluate(tiny_net, q)
    assert a.alpha == b.alpha
    assert np.array_equal(a.color, b.color)


def test_sphere_gradient_points_inward(unit_sphere):
    g = evaluate_alpha_gradient(unit_sphere, (2.0, 0.0, 0.0))
    assert np.allclose(g / np.linalg.norm(g), (-1.0, 0.0, 0.0))


def test_constant_field_gradient_is_degenerate():
    with pytest.raises(DegenerateGradientError):
        evaluate_alpha_gradient(ConstantField(0.3), (0.0, 0.0, 0.0))


def test_neural_alpha_gradient_matches_central_differences(tiny_net, rng):
    z = rng.standard_normal(4)
    pts = rng.uniform(-0.3, 0.3, (20, 3))
    g = tiny_net.alpha_gradient(pts, z)
    h = 1e-4
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        fd = (tiny_net.alpha(pts + e, z) - tiny_net.alpha(pts - e, z)) / (2 * h)
        rel = np.abs(fd - g[:, axis]) / np.maximum(np.maximum(np.abs(fd), np.abs(g[:, axis])), 1e-8)
        assert rel.max() < 1e-4


def test_mapping_network_zero_latent_gives_bias_slices():
    f = FilmSirenField(latent_dim=3, n_layers=2, width=4)
    off, shape = f.layout["map_out.b"]
    bias = np.arange(shape[0], dtype=np.float64) + 1.0
    f.params[off:off + shape[0]] = bias
    freqs, phases = run_mapping_network(f, np.zeros(3))
    assert np.array_equal(freqs.reshape(-1), bias[:8])
    assert np.array_equal(phases.reshape(-1), bias[8:])


def test_mapping_network_distinguishes_latents(tiny_net):
    a = run_mapping_network(tiny_net, np.ones(4))
    b = run_mapping_network(tiny_net, -np.ones(4))
    assert not np.allclose(a[0], b[0])
    again = run_mapping_network(tiny_net, np.ones(4))
    assert np.array_equal(a[0], again[0]) and np.array_equal(a[1], again[1])


def test_alpha_head_ignores_view_direction(tiny_net, rng):
    z = rng.standard_normal(4)
    pts = rng.uniform(-0.2, 0.2, (50, 3))
    net = tiny_net.network(z)
    a = net.alpha(pts)
    d1 = np.tile([0.0, 0.0, 1.0], (50, 1))
    d2 = np.tile([1.0, 0.0, 0.0], (50, 1))
    assert np.array_equal(a, tiny_net.alpha(pts, z))
    assert not np.allclose(tiny_net.color(pts, d1, z), tiny_net.color(pts, d2, z))


@pytest.mark.parametrize("field_factory", [
    lambda: AnalyticField.sphere(radius=0.5, sharpness=20.0, color=ColorFunction("ramp", gradient=np.eye(3))),
    lambda: AnalyticField.box(half_extents=(0.3, 0.2, 0.4), sharpness=50.0),
    lambda: AnalyticField("torus", major=0.5, minor=0.1, sharpness=30.0),
    lambda: FilmSirenField.initialize(4, 2, 8, seed=0),
])
def test_outputs_lie_in_unit_interval(field_factory, rng):
    field = field_factory()
    z = np.zeros(field.latent_dim)
    pts = rng.uniform(-1.5, 1.5, (10_000, 3))
    d = rng.standard_normal((10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    a = field.alpha(pts, z)
    c = field.color(pts, d, z)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert c.min() >= 0.0 and c.max() <= 1.0


@given(direction=coords.filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_analytic_alpha_is_half_on_surface(direction):
    for field, surface in (
        (AnalyticField.sphere(center=(0.1, 0.0, -0.2), radius=0.7, sharpness=200.0), None),
        (AnalyticField.box(half_extents=(0.3, 0.5, 0.2), sharpness=200.0), "box"),
    ):
        u = direction / np.linalg.norm(direction)
        if surface == "box":
            p = u / np.max(np.abs(u) / field.half_extents)
        else:
            p = field.center + field.radius * u
        assert abs(field.alpha(p[None, :])[0] - 0.5) < 1e-12


def test_sphere_alpha_is_k_over_4_lipschitz(rng):
    k = 10.0
    f = AnalyticField.sphere(radius=1.0, sharpness=k)
    x = rng.uniform(-2, 2, (10_000, 3))
    y = x + rng.normal(0, 0.1, (10_000, 3))
    lhs = np.abs(f.alpha(x) - f.alpha(y))
    rhs = k / 4.0 * np.linalg.norm(x - y, axis=1)
    assert np.all(lhs <= rhs + 1e-15)


def test_analytic_gradient_matches_finite_differences(rng):
    for f in (AnalyticField.sphere(radius=0.5, sharpness=20.0),
              AnalyticField.box(half_extents=(0.3, 0.2, 0.4), sharpness=20.0),
              AnalyticField("torus", major=0.5, minor=0.15, sharpness=20.0)):
        pts = rng.uniform(-0.8, 0.8, (200, 3))
        g = f.alpha_gradient(pts)
        h = 1e-6
        fd = np.column_stack([(f.alpha(pts + h * e) - f.alpha(pts - h * e)) / (2 * h) for e in np.eye(3)])
        assert np.allclose(g, fd, atol=1e-6)


def test_plane_ramp_has_constant_normals(rng):
    f = PlaneRampField(slope=(0.0, 0.0, -2.0), offset=2.5)
    g = f.alpha_gradient(rng.uniform(0.9, 1.1, (30, 3)))
    assert np.all(g == g[0])


def test_density_field_reproduces_source_alpha(small_sphere, rng):
    spacing = 0.02
    df = DensityField(small_sphere, spacing)
    pts = rng.uniform(-0.1, 0.1, (500, 3))
    recovered = 1.0 - np.exp(-df.density(pts) * spacing)
    assert np.allclose(recovered, np.minimum(small_sphere.alpha(pts), 1 - 1e-7), atol=1e-12)


def test_color_lipschitz_bounds_observed_slope(tiny_net, rng):
    z = rng.standard_normal(4)
    k = tiny_net.color_lipschitz(z)
    x = rng.uniform(-0.5, 0.5, (2000, 3))
    y = x + rng.normal(0, 0.01, (2000, 3))
    d = np.tile([0.0, 0.0, -1.0], (2000, 1))
    diff = np.abs(tiny_net.color(x, d, z) - tiny_net.color(y, d, z)).max(axis=1)
    assert np.all(diff <= k * np.linalg.norm(x - y, axis=1) + 1e-12)


def test_checkpoint_round_trip(tmp_path, tiny_net):
    path = tmp_path / "net.bin"
    tiny_net.save(path)
    back = FilmSirenField.load(path)
    assert (back.latent_dim, back.n_layers, back.width) == (4, 2, 8)
    assert np.array_equal(back.params, tiny_net.params)
    assert path.read_bytes() == back.to_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ConfigurationError):
        FilmSirenField.from_bytes(b"nope")
    with pytest.raises(ConfigurationError):
        FilmSirenField.from_bytes(b"XXXX" + bytes(12))


def test_latent_dimension_is_checked(tiny_net):
    with pytest.raises(ValueError):
        tiny_net.alpha(np.zeros((1, 3)), np.zeros(5))


def test_unknown_shape_rejected():
    with pytest.raises(ConfigurationError):
        AnalyticField("cone")

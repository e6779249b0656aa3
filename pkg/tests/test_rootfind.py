import numpy as np
import pytest
from hypothesis import given, strategies as st

from occufield.field import AnalyticField, ConstantField, PlaneRampField
from occufield.rootfind import first_crossing, locate_surface, locate_surfaces, query_budget
from occufield.sampling import Ray, RayBatch
from occufield.verify import sphere_entry

AXIS_RAY = Ray((0.0, 0.0, 1.0), (0.0, 0.0, -1.0), 0.88, 1.12)


def depth_ramp():
    # alpha(t) = (t - 0.88) / 0.24 along the axis ray
    return PlaneRampField(slope=(0.0, 0.0, -1.0 / 0.24), offset=0.5)


def test_affine_ramp_is_exact_after_one_secant_step():
    hit = locate_surface(depth_ramp(), AXIS_RAY, M=12, m_s=1)
    assert hit.found
    assert abs(hit.t_s - 1.0) <= 1e-12


@given(frac=st.floats(0.05, 0.95), scale=st.floats(0.5, 0.99))
def test_any_unclipped_ramp_is_exact(frac, scale):
    # alpha runs affinely from 0.5 - scale*frac to 0.5 + scale*(1 - frac) over the bounds
    rate = scale / 0.24
    t_star = 0.88 + frac * 0.24
    field = PlaneRampField(slope=(0.0, 0.0, -rate), offset=0.5 + rate * (1.0 - t_star))
    hit = locate_surface(field, AXIS_RAY, M=12, m_s=1)
    assert hit.found
    assert abs(hit.t_s - t_star) <= 1e-12


def test_sphere_on_axis():
    sphere = AnalyticField.sphere(center=(0.0, 0.0, 0.0), radius=0.05, sharpness=200.0)
    hit = locate_surface(sphere, AXIS_RAY, M=12, m_s=3)
    exact = sphere_entry(np.array([[0.0, 0.0, 1.0]]), np.array([[0.0, 0.0, -1.0]]), np.zeros(3), 0.05)[0]
    assert exact == pytest.approx(0.95, abs=1e-15)
    assert abs(hit.t_s - exact) < 1e-3
    assert hit.queries_used <= 12 + 1 + 3


def test_empty_ray_reports_miss_with_scan_queries():
    hit = locate_surface(ConstantField(0.0), AXIS_RAY, M=12, m_s=3)
    assert not hit.found
    assert np.isnan(hit.t_s)
    assert hit.bin_index == -1
    assert hit.queries_used == 13


def test_already_inside_at_near_bound_is_a_miss():
    # alpha >= tau at t_near has no below-to-above transition
    assert not locate_surface(ConstantField(0.9), AXIS_RAY).found


@given(a=st.lists(st.floats(0.0, 1.0), min_size=2, max_size=20), tau=st.floats(0.01, 0.99))
def test_first_crossing_matches_brute_force(a, tau):
    expected = -1
    for k in range(len(a) - 1):
        if a[k] < tau <= a[k + 1]:
            expected = k
            break
    assert first_crossing(np.array(a), tau)[0] == expected


def test_hit_lies_in_selected_bin(rng):
    sphere = AnalyticField.sphere(radius=0.08, sharpness=200.0)
    o = np.tile([0.0, 0.0, 1.0], (200, 1))
    d = np.column_stack([rng.uniform(-0.06, 0.06, (200, 2)), -np.ones(200)])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    hits = locate_surfaces(sphere, RayBatch(o, d, 0.88, 1.12), M=12, m_s=3)
    edges = np.linspace(0.88, 1.12, 13)
    f = hits.found
    assert f.sum() > 50
    k = hits.bin_index[f]
    assert np.all(hits.t_s[f] >= edges[k]) and np.all(hits.t_s[f] <= edges[k + 1])
    assert np.all(hits.queries_used <= 16)


def test_batched_matches_single(rng):
    sphere = AnalyticField.sphere(radius=0.08, sharpness=200.0)
    o = np.tile([0.0, 0.0, 1.0], (5, 1))
    d = np.column_stack([rng.uniform(-0.05, 0.05, (5, 2)), -np.ones(5)])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    batch = locate_surfaces(sphere, RayBatch(o, d, 0.88, 1.12))
    for i in range(5):
        one = locate_surface(sphere, Ray(o[i], d[i], 0.88, 1.12))
        assert one.found == batch[i].found
        if one.found:
            assert one.t_s == batch[i].t_s


def test_argument_checks():
    with pytest.raises(ValueError):
        locate_surface(depth_ramp(), AXIS_RAY, M=1)
    with pytest.raises(ValueError):
        locate_surface(depth_ramp(), AXIS_RAY, tau=1.0)
    with pytest.raises(ValueError):
        locate_surface(depth_ramp(), AXIS_RAY, m_s=-1)


@pytest.mark.parametrize("mode,expected", [
    ("cumulative", 27), ("surface_only", 16), ("hierarchical_baseline", 24),
])
def test_query_budget(mode, expected):
    assert query_budget(12, 3, 12, mode) == expected


def test_query_budget_unknown_mode():
    with pytest.raises(ValueError):
        query_budget(12, 3, 12, "fancy")

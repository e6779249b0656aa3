import numpy as np
import pytest

from occufield.field import AnalyticField
from occufield.verify import (
    box_entry,
    certified_field,
    equivalence_suite,
    gradient_suite,
    oracle_sdf,
    random_rays_toward,
    rootfind_suite,
    sphere_entry,
)


def test_sphere_entry_closed_form():
    o = np.array([[0.0, 0.0, 1.0], [0.0, 0.5, 1.0]])
    d = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]])
    t = sphere_entry(o, d, np.zeros(3), 0.25)
    assert t[0] == pytest.approx(0.75, abs=1e-15)
    assert np.isnan(t[1])


def test_box_entry_closed_form():
    o = np.array([[0.0, 0.0, 1.0], [0.3, 0.0, 1.0], [0.0, 0.0, 1.0]])
    d = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0], [0.6, 0.0, -0.8]])
    t = box_entry(o, d, np.zeros(3), np.array([0.2, 0.2, 0.1]))
    assert t[0] == pytest.approx(0.9, abs=1e-15)
    assert np.isnan(t[1])
    # oblique ray enters through the +z face at z = 0.1, x = 0.675 > 0.2: a miss
    assert np.isnan(t[2])


def test_oracle_sdf_is_independent_of_sharpness():
    for k in (10.0, 200.0):
        box = AnalyticField.box(half_extents=(0.2, 0.1, 0.3), sharpness=k)
        assert oracle_sdf(box, np.array([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]])) == pytest.approx([-0.1, 0.3])


def test_rays_aim_at_target(rng):
    rays = random_rays_toward(rng, 50, np.zeros(3), 0.0)
    assert np.allclose(np.linalg.norm(rays.origins, axis=1), 1.0)
    assert np.allclose(np.einsum("ij,ij->i", rays.directions, -rays.origins), 1.0)


@pytest.mark.parametrize("field", [
    AnalyticField.sphere(radius=0.08, sharpness=200.0),
    AnalyticField.sphere(center=(0.02, -0.01, 0.0), radius=0.06, sharpness=200.0),
    AnalyticField.box(half_extents=(0.06, 0.05, 0.04), sharpness=200.0),
])
def test_rootfind_suite_passes(field):
    res = rootfind_suite(field, n_rays=1000, seed=1)
    assert res.passed, res.violations[:3]
    assert res.summary["well_posed"] > 400
    assert res.summary["max_error"] < 1e-3


def test_rootfind_suite_can_fail():
    # without secant refinement the bin interpolation alone is too coarse
    res = rootfind_suite(AnalyticField.sphere(radius=0.08, sharpness=200.0), n_rays=300, m_s=0)
    assert not res.passed
    assert res.violations and "exact" in res.violations[0]


def test_equivalence_suite_on_certified_field(rng):
    z = np.clip(rng.standard_normal(16), -2, 2)
    field = certified_field(z, seed=0)
    rays = random_rays_toward(np.random.default_rng(0), 1000, np.zeros(3), 0.1)
    res = equivalence_suite(field, rays, z)
    assert res.passed, res.violations
    assert res.summary["monotone"]
    assert all(r["rays_compared"] > 100 for r in res.summary["rows"])


def test_equivalence_suite_rejects_vacuous_check(rng):
    far = AnalyticField.sphere(center=(5.0, 5.0, 5.0), radius=0.01)
    rays = random_rays_toward(rng, 50, np.zeros(3), 0.05)
    res = equivalence_suite(far, rays)
    assert not res.passed


def test_gradient_suite_passes():
    res = gradient_suite(n_probes=120, seed=3)
    assert res.passed, res.violations[:3]
    assert set(res.summary["per_objective"]) == {"alpha", "color", "reconstruction", "opacity", "normal", "gan"}

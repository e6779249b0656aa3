import numpy as np
import pytest

from occufield.field import AnalyticField, ConstantField
from occufield.extract import euler_characteristic, marching_cubes, obj_text, sample_grid, write_obj

BOUNDS = ((-0.8, -0.8, -0.8), (0.8, 0.8, 0.8))


def radius_error(res):
    sphere = AnalyticField.sphere(radius=0.5, sharpness=20.0)
    mesh = marching_cubes(sphere, None, BOUNDS, res)
    return float(np.mean(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5))), mesh


def test_sphere_radius_within_two_cells():
    err, mesh = radius_error(64)
    cell = 1.6 / 63
    assert err < 2 * cell
    assert not mesh.empty
    assert mesh.faces.min() >= 0 and mesh.faces.max() < len(mesh.vertices)


def test_sphere_mesh_is_closed():
    _, mesh = radius_error(32)
    assert euler_characteristic(mesh) == 2


def test_vertices_lie_on_level_set():
    sphere = AnalyticField.sphere(radius=0.5, sharpness=20.0)
    mesh = marching_cubes(sphere, None, BOUNDS, 32)
    a = sphere.alpha(mesh.vertices)
    # linear interpolation inside a cell; the logistic is nearly linear at this scale
    assert np.max(np.abs(a - 0.5)) < 0.01


def test_error_shrinks_with_resolution():
    # a sharp sphere so that the interpolation error dominates
    sphere = AnalyticField.sphere(radius=0.5, sharpness=400.0)
    errs = []
    for res in (17, 33):
        mesh = marching_cubes(sphere, None, BOUNDS, res)
        errs.append(np.mean(np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5)))
    assert errs[0] / errs[1] >= 1.5


def test_constant_field_gives_empty_mesh():
    mesh = marching_cubes(ConstantField(0.2), None, BOUNDS, 8)
    assert mesh.empty
    assert euler_characteristic(mesh) == 0
    assert obj_text(mesh).count("\n") == 1


def test_extraction_is_deterministic():
    a = marching_cubes(AnalyticField.box(half_extents=(0.3, 0.2, 0.4), sharpness=50.0), None, BOUNDS, 20)
    b = marching_cubes(AnalyticField.box(half_extents=(0.3, 0.2, 0.4), sharpness=50.0), None, BOUNDS, 20)
    assert obj_text(a) == obj_text(b)


def test_obj_format(tmp_path):
    _, mesh = radius_error(12)
    path = tmp_path / "m.obj"
    write_obj(mesh, path)
    blob = path.read_bytes()
    assert b"\r" not in blob
    lines = blob.decode("ascii").splitlines()
    assert lines[0].startswith("#")
    v = [ln for ln in lines if ln.startswith("v ")]
    f = [ln for ln in lines if ln.startswith("f ")]
    assert len(v) == len(mesh.vertices) and len(f) == len(mesh.faces)
    assert lines.index(f[0]) > lines.index(v[-1])
    assert all(len(tok.split(".")[1]) == 6 for tok in v[0].split()[1:])
    idx = np.array([[int(t) for t in ln.split()[1:]] for ln in f])
    assert idx.min() == 1 and idx.max() <= len(v)


def test_grid_validation():
    with pytest.raises(ValueError):
        sample_grid(ConstantField(0.2), None, BOUNDS, 1)
    with pytest.raises(ValueError):
        sample_grid(ConstantField(0.2), None, ((0, 0, 0), (0, 1, 1)), 4)

"""Iso-surface meshes of alpha = tau on a regular grid."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure

from ._validation import check_latent, check_positive_int

GRID_CHUNK = 65536


@dataclass(frozen=True)
class IsoMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3), 0-based
    resolution: tuple

    @property
    def empty(self) -> bool:
        return self.faces.shape[0] == 0


def _grid(bounds, resolution):
    lo, hi = np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
        raise ValueError("bounds must be ((x0, y0, z0), (x1, y1, z1)) with x1 > x0 etc.")
    res = np.broadcast_to(np.asarray(resolution), (3,))
    res = tuple(check_positive_int(int(r), "resolution", minimum=2) for r in res)
    return lo, hi, res


def sample_grid(field, latent, bounds, resolution) -> np.ndarray:
    """Alpha at every grid node, shape (rx, ry, rz), evaluated in fixed chunks."""
    lo, hi, res = _grid(bounds, resolution)
    z = check_latent(latent, field.latent_dim)
    axes = [np.linspace(lo[i], hi[i], res[i]) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], GRID_CHUNK):
        out[s:s + GRID_CHUNK] = field.alpha(pts[s:s + GRID_CHUNK], z)
    return out.reshape(res)


def marching_cubes(field, latent=None, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), resolution=64,
                   tau: float = 0.5) -> IsoMesh:
    """Triangle mesh of the alpha = tau level set.

    Vertices are placed by linear interpolation along grid edges.  A grid
    with no crossing yields an empty (valid) mesh.
    """
    lo, hi, res = _grid(bounds, resolution)
    values = sample_grid(field, latent, (lo, hi), res)
    if not (values.min() < tau < values.max()):
        return IsoMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), res)
    spacing = tuple((hi - lo) / (np.asarray(res) - 1))
    verts, faces, _, _ = measure.marching_cubes(values, level=tau, spacing=spacing, method="lewiner")
    return IsoMesh(verts.astype(np.float64) + lo, faces.astype(np.int64), res)


def euler_characteristic(mesh: IsoMesh) -> int:
    """V - E + F counting only vertices referenced by faces."""
    if mesh.empty:
        return 0
    f = mesh.faces
    edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    n_edges = np.unique(edges, axis=0).shape[0]
    n_verts = np.unique(f).size
    return int(n_verts - n_edges + f.shape[0])


def obj_text(mesh: IsoMesh) -> str:
    """Wavefront OBJ with 6-decimal vertices and 1-based faces."""
    rx, ry, rz = mesh.resolution
    lines = [f"# iso-surface mesh, grid {rx}x{ry}x{rz}, {len(mesh.vertices)} vertices, {len(mesh.faces)} faces"]
    lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def write_obj(mesh: IsoMesh, path) -> None:
    Path(path).write_bytes(obj_text(mesh).encode("ascii"))

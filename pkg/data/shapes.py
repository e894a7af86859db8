"""
Built-in reference shapes for smoke runs, acceptance runs and tests.

Meshes come from trimesh's primitive generators; clouds are sampled from
them with the seeded area-weighted sampler so they are reproducible.
"""

import logging
from typing import Callable, Dict

import numpy as np
import trimesh

from core.geometry import GeometryError, PointCloud3, TriangleMesh, sample_mesh_surface

logger = logging.getLogger(__name__)


def _from_trimesh(mesh: trimesh.Trimesh) -> TriangleMesh:
    return TriangleMesh(
        vertices=np.asarray(mesh.vertices, dtype=np.float64),
        faces=np.asarray(mesh.faces, dtype=np.int64),
        normals=np.asarray(mesh.vertex_normals, dtype=np.float64),
    )


def icosphere_mesh(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Geodesic sphere; 3 subdivisions give 642 vertices and 1280 faces."""
    return _from_trimesh(trimesh.creation.icosphere(subdivisions=subdivisions, radius=radius))


def box_mesh(extent: float = 2.0, subdivisions: int = 3) -> TriangleMesh:
    """Axis-aligned cube centered at the origin, optionally subdivided."""
    mesh = trimesh.creation.box(extents=(extent, extent, extent))
    for _ in range(subdivisions):
        mesh = mesh.subdivide()
    return _from_trimesh(mesh)


def sphere_cloud(n: int, seed: int = 0) -> PointCloud3:
    """n points on the unit sphere (icosphere samples projected radially)."""
    samples = sample_mesh_surface(icosphere_mesh(4), n, seed).points
    return PointCloud3(samples / np.linalg.norm(samples, axis=1, keepdims=True))


def cube_cloud(n: int, seed: int = 0) -> PointCloud3:
    """n points on the surface of the cube [-1, 1]^3."""
    return sample_mesh_surface(box_mesh(subdivisions=0), n, seed)


BUILTIN_SHAPES: Dict[str, Callable[[], TriangleMesh]] = {
    "sphere": lambda: icosphere_mesh(3),
    "icosphere": lambda: icosphere_mesh(3),
    "cube": lambda: box_mesh(),
    "box": lambda: box_mesh(),
}


def builtin_shape(name: str) -> TriangleMesh:
    """Mesh for a 'builtin:<name>' input."""
    key = name.lower()
    if key not in BUILTIN_SHAPES:
        raise GeometryError(f"Unknown built-in shape '{name}'. Available: {sorted(BUILTIN_SHAPES)}")
    logger.info(f"Using built-in shape '{key}'")
    return BUILTIN_SHAPES[key]()

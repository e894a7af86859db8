"""
Geometry Module - Spatial kernels for point cloud parameterization.

Provides:
1. Point cloud containers (3D points, 2D UVs, triangle meshes)
2. Exact KNN queries on a kd-tree
3. Chamfer distance
4. Area-weighted surface sampling and farthest point sampling
5. The convex hull used as warm-up target
6. Normalization into the unit bounding sphere
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

logger = logging.getLogger(__name__)

HULL_EPSILON = 1e-12
L_FLOOR = 1e-6


class GeometryError(ValueError):
    """Raised when a geometric kernel receives unusable input."""


@dataclass
class PointCloud3:
    """N x 3 spatial point set with optional (evaluation-only) normals."""
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("Point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class UvCloud:
    """N x 2 parameter coordinates."""
    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(self.coords)):
            raise GeometryError("UV cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass
class TriangleMesh:
    """Triangle soup: vertices (V x 3) and 0-based faces (F x 3)."""
    vertices: np.ndarray
    faces: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def to_cloud(self) -> PointCloud3:
        return PointCloud3(self.vertices.copy(), self.normals)


@dataclass
class NormalizationTransform:
    """Maps raw coordinates into the unit bounding sphere: (x - center) / scale."""
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + self.center

    def to_dict(self) -> Dict[str, Any]:
        return {"center": [float(c) for c in self.center], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormalizationTransform":
        return cls(center=np.asarray(data["center"], dtype=np.float64), scale=float(data["scale"]))


# ============================================================================
# NEAREST NEIGHBORS
# ============================================================================

class KdTree:
    """
    Immutable kd-tree over a fixed 2D or 3D point set.

    Usage:
        tree = KdTree(points)
        idx = tree.query(points, k=8, exclude_self=True)
    """

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise GeometryError("KdTree needs a non-empty (N, d) point array")
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def query(
        self,
        queries: np.ndarray,
        k: int,
        exclude_self: bool = False,
        self_indices: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """
        Exact k nearest neighbors of each query, sorted by distance.

        Args:
            queries: (M, d) query points
            k: Neighbors per query
            exclude_self: Omit the query's own entry when it is a member
            self_indices: Member index of each query, when known

        Returns:
            (M, k) neighbor indices
        """
        size = len(self)
        if k >= size or k < 1:
            raise GeometryError(f"k={k} must be in [1, {size - 1}] for {size} indexed points")
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))

        if not exclude_self:
            _, idx = self._tree.query(queries, k=k)
            return np.asarray(idx, dtype=np.int64).reshape(len(queries), k)

        kk = min(k + 1, size)
        dist, idx = self._tree.query(queries, k=kk)
        dist = np.asarray(dist).reshape(len(queries), kk)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(queries), kk)

        if self_indices is None:
            # The query is a member iff some hit sits at distance 0
            self_indices = np.where(dist[:, 0] == 0.0, idx[:, 0], -1)
        self_indices = np.asarray(self_indices, dtype=np.int64)

        result = np.empty((len(queries), k), dtype=np.int64)
        for row in range(len(queries)):
            hits = idx[row]
            keep = hits[hits != self_indices[row]]
            result[row] = keep[:k]
        return result

    def nearest_distance(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Distance to and index of the nearest member for each query."""
        dist, idx = self._tree.query(np.atleast_2d(queries), k=1)
        return np.asarray(dist, dtype=np.float64), np.asarray(idx, dtype=np.int64)


def knn(index: KdTree, query: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    """
    k nearest neighbors of a single query point, sorted by distance.

    When exclude_self is set and the query is a member of the indexed set,
    that member is omitted.
    """
    return index.query(np.asarray(query, dtype=np.float64)[None, :], k, exclude_self)[0]


def self_knn(points: np.ndarray, k: int) -> np.ndarray:
    """KNN of every member of a point set among the others."""
    tree = KdTree(points)
    return tree.query(points, k, exclude_self=True, self_indices=np.arange(len(points)))


# ============================================================================
# DISTANCES
# ============================================================================

def nearest_assignments(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Index of the nearest b for every a, and of the nearest a for every b."""
    a_to_b = KdTree(b).nearest_distance(a)[1]
    b_to_a = KdTree(a).nearest_distance(b)[1]
    return a_to_b, b_to_a


def chamfer(a: Union[PointCloud3, np.ndarray], b: Union[PointCloud3, np.ndarray]) -> float:
    """
    Symmetric Chamfer distance with squared distances, mean per direction.

    Returns:
        mean_a min_b |a - b|^2 + mean_b min_a |a - b|^2
    """
    a_pts = a.points if isinstance(a, PointCloud3) else np.asarray(a, dtype=np.float64)
    b_pts = b.points if isinstance(b, PointCloud3) else np.asarray(b, dtype=np.float64)
    if len(a_pts) == 0 or len(b_pts) == 0:
        raise GeometryError("Chamfer distance of an empty cloud")
    a_to_b, b_to_a = nearest_assignments(a_pts, b_pts)
    forward = np.mean(np.sum((a_pts - b_pts[a_to_b]) ** 2, axis=1))
    backward = np.mean(np.sum((b_pts - a_pts[b_to_a]) ** 2, axis=1))
    return float(forward + backward)


# ============================================================================
# SAMPLING
# ============================================================================

def sample_mesh_surface(mesh: TriangleMesh, n: int, seed: int) -> PointCloud3:
    """
    Draw n points area-weighted over triangles, uniform barycentric within each.

    Deterministic for a fixed seed.
    """
    areas = mesh.triangle_areas()
    total = float(areas.sum())
    if len(mesh.faces) == 0 or total <= 0.0:
        raise GeometryError("Cannot sample a mesh with zero total area")

    rng = np.random.default_rng(seed)
    faces = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)

    a = mesh.vertices[mesh.faces[faces, 0]]
    b = mesh.vertices[mesh.faces[faces, 1]]
    c = mesh.vertices[mesh.faces[faces, 2]]
    points = (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return PointCloud3(points)


def farthest_point_sampling(points: np.ndarray, m: int, seed: int = 0) -> np.ndarray:
    """
    Indices of m points chosen by iterative farthest point sampling.

    The first point is drawn from the seeded generator.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if m >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    chosen = np.empty(m, dtype=np.int64)
    distance = np.full(n, np.inf)
    farthest = int(rng.integers(n))
    for i in range(m):
        chosen[i] = farthest
        d = np.sum((points - points[farthest]) ** 2, axis=1)
        distance = np.minimum(distance, d)
        farthest = int(np.argmax(distance))
    return chosen


# ============================================================================
# CONVEX HULL
# ============================================================================

def convex_hull_3d(p: Union[PointCloud3, np.ndarray]) -> TriangleMesh:
    """
    Triangulated convex hull with outward-oriented faces (quickhull via Qhull).

    Raises:
        GeometryError: fewer than 4 points or a coplanar/collinear set
    """
    points = p.points if isinstance(p, PointCloud3) else np.asarray(p, dtype=np.float64)
    if len(points) < 4:
        raise GeometryError(f"Convex hull needs at least 4 points, got {len(points)}")
    try:
        hull = ConvexHull(points)
    except QhullError as e:
        raise GeometryError(f"Degenerate input for convex hull: {e}") from e

    used = np.unique(hull.simplices)
    remap = -np.ones(len(points), dtype=np.int64)
    remap[used] = np.arange(len(used))
    vertices = points[used]

    faces = hull.simplices.copy()
    for row, (face, equation) in enumerate(zip(faces, hull.equations)):
        a, b, c = points[face]
        normal = np.cross(b - a, c - a)
        if np.dot(normal, equation[:3]) < 0.0:
            faces[row] = face[[0, 2, 1]]

    return TriangleMesh(vertices, remap[faces])


def hull_plane_offsets(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """Signed distances of points to every outward face plane, shape (M, F)."""
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    normals = np.cross(b - a, c - a)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offsets = np.sum(normals * a, axis=1)
    return np.asarray(points) @ normals.T - offsets[None, :]


def unit_sphere_cloud(n: int, seed: int) -> PointCloud3:
    """Uniform samples on the unit sphere (warm-up fallback target)."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    return PointCloud3(v / np.linalg.norm(v, axis=1, keepdims=True))


# ============================================================================
# UV STATISTICS AND NORMALIZATION
# ============================================================================

def uv_side_length(q: Union[UvCloud, np.ndarray]) -> float:
    """Side length L(Q) of the square bounding box: max(width, height)."""
    coords = q.coords if isinstance(q, UvCloud) else np.asarray(q, dtype=np.float64)
    if len(coords) == 0:
        raise GeometryError("uv_side_length of an empty UV cloud")
    extent = coords.max(axis=0) - coords.min(axis=0)
    return float(np.max(extent))


def guarded_side_length(q: Union[UvCloud, np.ndarray], floor: float = L_FLOOR) -> float:
    """L(Q) clamped away from zero for thresholds derived from it."""
    return max(uv_side_length(q), floor)


def normalize_cloud(p: PointCloud3) -> Tuple[PointCloud3, NormalizationTransform]:
    """
    Center at the centroid and scale so the bounding sphere has radius 1.

    Raises:
        GeometryError: empty or zero-extent cloud
    """
    if len(p) == 0:
        raise GeometryError("Cannot normalize an empty cloud")
    center = p.points.mean(axis=0)
    radius = float(np.max(np.linalg.norm(p.points - center, axis=1)))
    if radius <= 0.0:
        raise GeometryError("Cannot normalize a zero-extent cloud")
    transform = NormalizationTransform(center=center, scale=radius)
    return PointCloud3(transform.apply(p.points), p.normals), transform

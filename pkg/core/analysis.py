"""
Analysis Module - Consumers of a trained mapping.

1. Cutting seams: points whose 3D neighbors land far apart in UV
2. Dense inference: Unwrap(Cut(P)) on any number of points, no fine-tuning
3. Metrics: corner-angle conformality on meshes, UV flips and overlaps,
   Jacobian-based distortion proxies, Chamfer reconstruction error
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .autodiff import Jacobian32, jacobian_2d_to_3d, normal_from_jacobian, singular_values_3x2
from .geometry import (
    L_FLOOR,
    PointCloud3,
    TriangleMesh,
    UvCloud,
    chamfer,
    guarded_side_length,
    self_knn,
)
from .networks import SubNetworkSet, cut_forward, stitch_forward, unwrap_forward, wrap_forward

logger = logging.getLogger(__name__)

# 3D triangles with a smaller area are left out of the angle metric
DEGENERATE_AREA = 1e-12
PROXY_POINTS = 4096


class AnalysisError(ValueError):
    """Raised for mismatched clouds, UVs and meshes."""


def _points(p: Union[PointCloud3, np.ndarray]) -> np.ndarray:
    return p.points if isinstance(p, PointCloud3) else np.asarray(p, dtype=np.float64)


def _coords(q: Union[UvCloud, np.ndarray]) -> np.ndarray:
    return q.coords if isinstance(q, UvCloud) else np.asarray(q, dtype=np.float64)


# ============================================================================
# SEAMS
# ============================================================================

@dataclass
class SeamSet:
    """Seam points of P: every member has distances[i] > threshold."""
    indices: np.ndarray
    distances: np.ndarray
    threshold: float

    def __len__(self) -> int:
        return len(self.indices)

    def mask(self) -> np.ndarray:
        flags = np.zeros(len(self.distances), dtype=bool)
        flags[self.indices] = True
        return flags

    def to_dict(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "count": len(self.indices),
            "fraction": len(self.indices) / max(len(self.distances), 1),
            "indices": [int(i) for i in self.indices],
        }


def seam_distances(P: Union[PointCloud3, np.ndarray], Q: Union[UvCloud, np.ndarray], k_cut: int) -> np.ndarray:
    """Largest UV distance from each point to its k_cut nearest 3D neighbors."""
    points, coords = _points(P), _coords(Q)
    if len(points) != len(coords):
        raise AnalysisError(f"P has {len(points)} rows but Q has {len(coords)}")
    neighbors = self_knn(points, k_cut)
    gaps = np.linalg.norm(coords[:, None, :] - coords[neighbors], axis=2)
    return gaps.max(axis=1)


def extract_seams(
    P: Union[PointCloud3, np.ndarray],
    Q: Union[UvCloud, np.ndarray],
    k_cut: int = 3,
    t_cut: Optional[float] = None,
    cut_ratio: float = 0.01,
    l_floor: float = L_FLOOR,
) -> SeamSet:
    """
    Points lying on cutting seams.

    A point is on a seam when one of its k_cut nearest 3D neighbors is more
    than t_cut away in UV. t_cut defaults to cut_ratio * L(Q).
    """
    if t_cut is None:
        t_cut = cut_ratio * guarded_side_length(_coords(Q), l_floor)
    distances = seam_distances(P, Q, k_cut)
    indices = np.flatnonzero(distances > t_cut)
    logger.info(f"Seams: {len(indices)} / {len(distances)} points above T_cut={t_cut:.6f}")
    return SeamSet(indices=indices, distances=distances, threshold=float(t_cut))


# ============================================================================
# INFERENCE
# ============================================================================

def infer_uv(
    net: SubNetworkSet,
    P_dense: Union[PointCloud3, np.ndarray],
    chunk_size: Optional[int] = None,
) -> UvCloud:
    """
    UV coordinates Unwrap(Cut(P)) for already-normalized points.

    Args:
        net: Trained sub-networks
        P_dense: Points in the training normalization frame
        chunk_size: Evaluate in row blocks of this size (None = one pass)
    """
    points = _points(P_dense)
    if chunk_size is None or len(points) <= chunk_size:
        return unwrap_forward(net, cut_forward(net, PointCloud3(points)))
    blocks = [
        unwrap_forward(net, cut_forward(net, PointCloud3(points[i:i + chunk_size]))).coords
        for i in range(0, len(points), chunk_size)
    ]
    return UvCloud(np.concatenate(blocks, axis=0))


def reconstruct(net: SubNetworkSet, P: Union[PointCloud3, np.ndarray]) -> PointCloud3:
    """Stitch(Wrap(Unwrap(Cut(P)))): the 3D -> 2D -> 3D round trip."""
    uv = infer_uv(net, P)
    return stitch_forward(net, wrap_forward(net, uv))


def surface_jacobians(net: SubNetworkSet, uv: Union[UvCloud, np.ndarray]) -> Jacobian32:
    """Jacobians of Stitch o Wrap at the given UV points."""
    return jacobian_2d_to_3d(lambda tape, d: net.stitch_net(tape, net.wrap_net(tape, d)), _coords(uv))


def surface_normals(
    net: SubNetworkSet,
    uv: Union[UvCloud, np.ndarray],
    chunk_size: int = 2048,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Learned unit normals of Stitch o Wrap at the given UVs, in row blocks.

    Returns:
        (N x 3 normals, boolean degenerate mask)
    """
    coords = _coords(uv)
    normals, degenerate = [], []
    for start in range(0, len(coords), chunk_size):
        j = surface_jacobians(net, coords[start:start + chunk_size])
        n, bad = normal_from_jacobian(j)
        normals.append(n.value)
        degenerate.append(bad)
    if not normals:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    return np.concatenate(normals, axis=0), np.concatenate(degenerate)


# ============================================================================
# METRICS
# ============================================================================

def _corner_angles_3d(tri: np.ndarray) -> np.ndarray:
    angles = np.empty(tri.shape[:2])
    for corner in range(3):
        a = tri[:, corner]
        e1 = tri[:, (corner + 1) % 3] - a
        e2 = tri[:, (corner + 2) % 3] - a
        angles[:, corner] = np.arctan2(
            np.linalg.norm(np.cross(e1, e2), axis=1), np.sum(e1 * e2, axis=1)
        )
    return angles


def _corner_angles_2d(tri: np.ndarray) -> np.ndarray:
    angles = np.empty(tri.shape[:2])
    for corner in range(3):
        a = tri[:, corner]
        e1 = tri[:, (corner + 1) % 3] - a
        e2 = tri[:, (corner + 2) % 3] - a
        cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        # Zero-length edges give arctan2(0, 0) = 0
        angles[:, corner] = np.arctan2(np.abs(cross), np.sum(e1 * e2, axis=1))
    return angles


def angle_differences(mesh: TriangleMesh, uv: Union[UvCloud, np.ndarray]) -> Tuple[np.ndarray, int]:
    """
    |angle_3D - angle_UV| for every corner of every non-degenerate triangle.

    Returns:
        (F' x 3 array of differences, number of excluded degenerate triangles)
    """
    coords = _coords(uv)
    if len(coords) != len(mesh.vertices):
        raise AnalysisError(f"Mesh has {len(mesh.vertices)} vertices but {len(coords)} UVs")
    keep = mesh.triangle_areas() > DEGENERATE_AREA
    excluded = int(np.sum(~keep))
    faces = mesh.faces[keep]
    diff = np.abs(_corner_angles_3d(mesh.vertices[faces]) - _corner_angles_2d(coords[faces]))
    return diff, excluded


def conformality_metric(mesh: TriangleMesh, uv: Union[UvCloud, np.ndarray]) -> float:
    """Mean absolute corner-angle difference between 3D and UV triangles, in radians."""
    diff, excluded = angle_differences(mesh, uv)
    if excluded:
        logger.warning(f"Conformality metric: excluded {excluded} degenerate 3D triangles")
    if diff.size == 0:
        raise AnalysisError("No non-degenerate triangles to evaluate")
    return float(np.mean(diff))


def flip_fraction(mesh: TriangleMesh, uv: Union[UvCloud, np.ndarray]) -> float:
    """
    Fraction of UV triangles whose orientation disagrees with the majority.

    A global mirror of the UVs leaves the value unchanged; zero-area UV
    triangles count towards neither orientation.
    """
    coords = _coords(uv)
    tri = coords[mesh.faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    signed = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    positive = int(np.sum(signed > 0.0))
    negative = int(np.sum(signed < 0.0))
    if len(signed) == 0:
        return 0.0
    return min(positive, negative) / len(signed)


def uv_overlap_fraction(Q: Union[UvCloud, np.ndarray], eps: float) -> float:
    """Fraction of points whose nearest UV neighbor is closer than eps."""
    if eps <= 0.0:
        raise AnalysisError(f"eps must be positive, got {eps}")
    coords = _coords(Q)
    if len(coords) < 2:
        return 0.0
    neighbor = self_knn(coords, 1)[:, 0]
    gaps = np.linalg.norm(coords - coords[neighbor], axis=1)
    return float(np.mean(gaps < eps))


def jacobian_conformality(j: Union[Jacobian32, Tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean |s1 - s2| / (s1 + s2); a cloud-only proxy, not comparable to the mesh metric."""
    s1, s2 = singular_values_3x2(j)
    denom = s1 + s2
    ratio = np.where(denom > 0.0, np.abs(s1 - s2) / np.where(denom > 0.0, denom, 1.0), 0.0)
    return float(np.mean(ratio))


def isometric_residual(j: Union[Jacobian32, Tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean |s1 - 1| + |s2 - 1|."""
    s1, s2 = singular_values_3x2(j)
    return float(np.mean(np.abs(s1 - 1.0) + np.abs(s2 - 1.0)))


@dataclass
class MetricReport:
    """Evaluation of a trained mapping on one shape. Angles in radians."""
    num_points: int
    conformality: float
    conformality_source: str
    overlap_fraction: float
    overlap_eps: float
    chamfer: float
    isometric_residual: float
    jacobian_conformality: float
    flip_fraction: Optional[float] = None
    degenerate_triangles: int = 0
    seam_count: int = 0
    seam_fraction: float = 0.0
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def evaluate_run(
    net: SubNetworkSet,
    cloud: Union[PointCloud3, np.ndarray],
    mesh: Optional[TriangleMesh] = None,
    k_cut: int = 3,
    cut_ratio: float = 0.01,
    eps_factor: float = 0.1,
    l_floor: float = L_FLOOR,
    seed: int = 0,
) -> Tuple[MetricReport, UvCloud, SeamSet]:
    """
    Infer UVs and compute every metric.

    With a mesh, its vertices are evaluated and the corner-angle metric is
    reported; otherwise the conformality field holds the Jacobian proxy.

    Returns:
        (MetricReport, inferred UVs, SeamSet)
    """
    points = mesh.vertices if mesh is not None else _points(cloud)
    uv = infer_uv(net, points)
    n = len(points)

    eps = eps_factor * guarded_side_length(uv, l_floor) / np.sqrt(n)
    seams = extract_seams(points, uv, k_cut=k_cut, cut_ratio=cut_ratio, l_floor=l_floor)

    sample = np.arange(n)
    if n > PROXY_POINTS:
        sample = np.sort(np.random.default_rng(seed).choice(n, size=PROXY_POINTS, replace=False))
    j = surface_jacobians(net, uv.coords[sample])
    proxy = jacobian_conformality(j)

    report = MetricReport(
        num_points=n,
        conformality=proxy,
        conformality_source="jacobian_proxy",
        overlap_fraction=uv_overlap_fraction(uv, eps),
        overlap_eps=float(eps),
        chamfer=chamfer(reconstruct(net, points), PointCloud3(points)),
        isometric_residual=isometric_residual(j),
        jacobian_conformality=proxy,
        seam_count=len(seams),
        seam_fraction=len(seams) / n,
    )
    if mesh is not None:
        diff, excluded = angle_differences(mesh, uv)
        if diff.size:
            report.conformality = float(np.mean(diff))
            report.conformality_source = "mesh"
        report.degenerate_triangles = excluded
        report.flip_fraction = flip_fraction(mesh, uv)
    return report, uv, seams

"""Tests for neighbor search, Chamfer, sampling, hulls and normalization."""

import numpy as np
import pytest

from core.geometry import (
    GeometryError,
    KdTree,
    NormalizationTransform,
    PointCloud3,
    TriangleMesh,
    chamfer,
    convex_hull_3d,
    farthest_point_sampling,
    guarded_side_length,
    hull_plane_offsets,
    knn,
    normalize_cloud,
    sample_mesh_surface,
    self_knn,
    uv_side_length,
)


def _brute_knn(points, query, k, exclude=None):
    d = np.linalg.norm(points - query, axis=1)
    if exclude is not None:
        d[exclude] = np.inf
    return set(np.argsort(d)[:k].tolist())


# ============================================================================
# KD-TREE
# ============================================================================

def test_knn_on_a_line_excludes_self():
    points = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]])
    idx = knn(KdTree(points), points[0], 2, exclude_self=True)
    assert idx.tolist() == [1, 2]


def test_knn_full_neighborhood():
    points = np.random.default_rng(0).normal(size=(7, 3))
    tree = KdTree(points)
    idx = knn(tree, points[3], 6, exclude_self=True)
    assert sorted(idx.tolist()) == [0, 1, 2, 4, 5, 6]


def test_knn_rejects_k_at_size():
    tree = KdTree(np.zeros((4, 3)) + np.arange(4)[:, None])
    with pytest.raises(GeometryError):
        tree.query(np.zeros((1, 3)), k=4)
    with pytest.raises(GeometryError):
        tree.query(np.zeros((1, 3)), k=0)


def test_knn_matches_brute_force(rng):
    points = rng.normal(size=(1000, 3))
    tree = KdTree(points)
    queries = rng.normal(size=(50, 3))
    idx = tree.query(queries, k=8)
    for q, row in zip(queries, idx):
        assert set(row.tolist()) == _brute_knn(points, q, 8)


def test_self_knn_matches_brute_force(rng):
    points = rng.uniform(size=(500, 3))
    idx = self_knn(points, 5)
    for i in range(0, 500, 25):
        assert set(idx[i].tolist()) == _brute_knn(points, points[i], 5, exclude=i)
        assert i not in idx[i]


def test_kd_tree_in_two_dimensions(rng):
    uv = rng.uniform(size=(200, 2))
    idx = self_knn(uv, 3)
    assert idx.shape == (200, 3)
    assert set(idx[0].tolist()) == _brute_knn(uv, uv[0], 3, exclude=0)


# ============================================================================
# CHAMFER
# ============================================================================

def test_chamfer_identical_sets_is_zero(rng):
    a = rng.normal(size=(20, 3))
    assert chamfer(a, a.copy()) == 0.0


def test_chamfer_single_points():
    assert chamfer(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]])) == pytest.approx(2.0)


def test_chamfer_two_to_one():
    a = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    b = np.array([[1.0, 0, 0]])
    # a -> b: mean(1, 1) = 1; b -> a: 1
    assert chamfer(a, b) == pytest.approx(2.0)


def test_chamfer_matches_brute_force(rng):
    a = rng.normal(size=(500, 3))
    b = rng.normal(size=(400, 3))
    d = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    expected = d.min(axis=1).mean() + d.min(axis=0).mean()
    assert chamfer(PointCloud3(a), PointCloud3(b)) == pytest.approx(expected, rel=1e-12)


def test_chamfer_empty_cloud():
    with pytest.raises(GeometryError):
        chamfer(np.zeros((0, 3)), np.zeros((2, 3)))


# ============================================================================
# SAMPLING
# ============================================================================

def test_samples_lie_on_the_triangle_plane():
    mesh = TriangleMesh(np.array([[0.0, 0, 0], [1.0, 0, 1], [0.0, 1, 2]]), np.array([[0, 1, 2]]))
    points = sample_mesh_surface(mesh, 1000, seed=3).points
    normal = np.cross(mesh.vertices[1] - mesh.vertices[0], mesh.vertices[2] - mesh.vertices[0])
    np.testing.assert_allclose((points - mesh.vertices[0]) @ normal, 0.0, atol=1e-12)


def test_sampling_follows_area():
    # Large triangle (area 4.5) next to a small one (area 0.5)
    vertices = np.array([[0.0, 0, 0], [3.0, 0, 0], [0.0, 3, 0], [10.0, 0, 0], [11.0, 0, 0], [10.0, 1, 0]])
    mesh = TriangleMesh(vertices, np.array([[0, 1, 2], [3, 4, 5]]))
    n = 10000
    points = sample_mesh_surface(mesh, n, seed=1).points
    count = int(np.sum(points[:, 0] < 5.0))
    sigma = np.sqrt(n * 0.9 * 0.1)
    assert abs(count - 0.9 * n) < 3 * sigma


def test_sampling_is_deterministic():
    mesh = TriangleMesh(np.eye(3), np.array([[0, 1, 2]]))
    a = sample_mesh_surface(mesh, 50, seed=9).points
    b = sample_mesh_surface(mesh, 50, seed=9).points
    np.testing.assert_array_equal(a, b)


def test_sampling_zero_area():
    mesh = TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(GeometryError):
        sample_mesh_surface(mesh, 10, seed=0)


def test_farthest_point_sampling_spreads_out():
    points = np.array([[0.0, 0, 0], [0.01, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [0.0, 0, 1]])
    chosen = farthest_point_sampling(points, 4, seed=2)
    assert len(set(chosen.tolist())) == 4
    # Two near-duplicates are never both picked before the three far corners
    assert not {0, 1} <= set(chosen.tolist())


def test_farthest_point_sampling_is_deterministic(rng):
    points = rng.normal(size=(300, 3))
    np.testing.assert_array_equal(
        farthest_point_sampling(points, 40, seed=5), farthest_point_sampling(points, 40, seed=5)
    )


# ============================================================================
# CONVEX HULL
# ============================================================================

def test_cube_hull():
    corners = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)])
    points = np.vstack([corners, [[0.5, 0.5, 0.5]]])
    hull = convex_hull_3d(points)
    assert len(hull.vertices) == 8
    assert len(hull.faces) == 12


def test_octahedron_hull_from_extremes(rng):
    inner = rng.normal(size=(200, 3))
    inner = inner / np.linalg.norm(inner, axis=1, keepdims=True) * rng.uniform(0, 1, size=(200, 1))
    extremes = np.vstack([np.eye(3) * 2.0, -np.eye(3) * 2.0])
    hull = convex_hull_3d(np.vstack([inner, extremes]))
    assert len(hull.faces) == 8
    assert {tuple(v) for v in hull.vertices} == {tuple(v) for v in extremes}


def test_hull_faces_point_outward(rng):
    points = rng.normal(size=(100, 3))
    hull = convex_hull_3d(points)
    # Every input lies on the inner side of every outward face plane
    assert np.all(hull_plane_offsets(hull, points) <= 1e-9)


def test_hull_rejects_coplanar_points():
    points = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [1.0, 1, 0], [0.5, 0.5, 0]])
    with pytest.raises(GeometryError):
        convex_hull_3d(points)


def test_hull_needs_four_points():
    with pytest.raises(GeometryError):
        convex_hull_3d(np.eye(3))


# ============================================================================
# UV EXTENT AND NORMALIZATION
# ============================================================================

def test_uv_side_length():
    assert uv_side_length(np.array([[0.0, 0.0], [1.0, 0.5]])) == 1.0
    assert uv_side_length(np.array([[-1.0, -1.0], [1.0, 1.0]])) == 2.0
    assert uv_side_length(np.ones((5, 2))) == 0.0


def test_guarded_side_length_floor():
    assert guarded_side_length(np.ones((5, 2)), floor=1e-6) == 1e-6


def test_normalize_unit_cube():
    corners = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0) for z in (0.0, 1.0)])
    cloud, transform = normalize_cloud(PointCloud3(corners))
    assert np.max(np.linalg.norm(cloud.points, axis=1)) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(transform.invert(cloud.points), corners, atol=1e-12)


def test_normalize_is_idempotent(rng):
    cloud, _ = normalize_cloud(PointCloud3(rng.normal(size=(50, 3))))
    again, transform = normalize_cloud(cloud)
    np.testing.assert_allclose(transform.center, 0.0, atol=1e-12)
    assert transform.scale == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(again.points, cloud.points, atol=1e-12)


def test_normalize_zero_extent():
    with pytest.raises(GeometryError):
        normalize_cloud(PointCloud3(np.ones((4, 3))))


def test_transform_dict_round_trip():
    transform = NormalizationTransform(center=np.array([1.0, -2.0, 0.5]), scale=3.0)
    restored = NormalizationTransform.from_dict(transform.to_dict())
    np.testing.assert_array_equal(restored.center, transform.center)
    assert restored.scale == 3.0


def test_non_finite_cloud_is_rejected():
    with pytest.raises(GeometryError):
        PointCloud3(np.array([[0.0, np.nan, 0.0]]))


def test_chamfer_is_invariant_under_rigid_motion(rng):
    a = rng.normal(size=(60, 3))
    b = rng.normal(size=(45, 3))
    rotation, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    shift = np.array([0.3, -2.0, 5.0])
    moved = chamfer(a @ rotation.T + shift, b @ rotation.T + shift)
    assert moved == pytest.approx(chamfer(a, b), rel=1e-9)

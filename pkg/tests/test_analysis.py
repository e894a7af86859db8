"""Tests for seams, dense inference and the evaluation metrics."""

import math

import numpy as np
import pytest

from core.analysis import (
    AnalysisError,
    angle_differences,
    conformality_metric,
    evaluate_run,
    extract_seams,
    flip_fraction,
    infer_uv,
    isometric_residual,
    jacobian_conformality,
    surface_normals,
    uv_overlap_fraction,
)
from core.geometry import PointCloud3, TriangleMesh
from core.networks import init_params
from core.pipeline import forward_3d_branch
from data.shapes import icosphere_mesh


def _lattice(n, spacing):
    axis = np.arange(n) * spacing
    uu, vv = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def _planar_mesh():
    """Unit square split into four triangles around its center."""
    vertices = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1, 0], [0.0, 1, 0], [0.5, 0.5, 0]])
    faces = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    return TriangleMesh(vertices, faces)


def _rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return q


# ============================================================================
# SEAMS
# ============================================================================

def test_no_seams_on_a_smooth_lattice():
    uv = _lattice(6, 0.1)
    points = np.column_stack([uv, np.zeros(len(uv))])
    seams = extract_seams(points, uv, k_cut=3, t_cut=0.15)
    assert len(seams) == 0


def test_three_collinear_points():
    points = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]])
    uv = np.array([[0.0, 0.0], [0.005, 0.0], [0.9, 0.0]])
    seams = extract_seams(points, uv, k_cut=2, cut_ratio=0.01)
    assert seams.threshold == pytest.approx(0.009)
    np.testing.assert_allclose(seams.distances, [0.9, 0.895, 0.9])
    assert seams.indices.tolist() == [0, 1, 2]


def test_seams_match_brute_force(rng):
    points = rng.uniform(size=(500, 3))
    uv = rng.uniform(size=(500, 2))
    seams = extract_seams(points, uv, k_cut=3, t_cut=0.3)

    expected = []
    for i in range(500):
        d3 = np.linalg.norm(points - points[i], axis=1)
        d3[i] = np.inf
        neighbors = np.argsort(d3)[:3]
        d = np.max(np.linalg.norm(uv[neighbors] - uv[i], axis=1))
        if d > 0.3:
            expected.append(i)
    assert seams.indices.tolist() == expected
    assert np.all(seams.distances[seams.indices] > seams.threshold)


def test_seam_mask_and_dict():
    # Nearest 3D neighbors pair up as (0, 1) and (2, 3)
    points = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0], [4.0, 0, 0]])
    uv = np.array([[0.0, 0.0], [0.001, 0.0], [1.0, 0.0], [5.0, 0.0]])
    seams = extract_seams(points, uv, k_cut=1, t_cut=0.5)
    assert seams.mask().tolist() == [False, False, True, True]
    data = seams.to_dict()
    assert data["count"] == 2 and data["fraction"] == 0.5
    assert data["indices"] == [2, 3]


def test_seam_size_mismatch():
    with pytest.raises(AnalysisError):
        extract_seams(np.zeros((4, 3)), np.zeros((3, 2)))


# ============================================================================
# INFERENCE
# ============================================================================

def test_inference_matches_training_forward(random_net, sphere_points):
    _, Q, _, _ = forward_3d_branch(random_net, sphere_points)
    np.testing.assert_allclose(infer_uv(random_net, sphere_points).coords, Q.value, rtol=1e-12, atol=1e-14)


def test_chunked_inference(random_net, sphere_points):
    whole = infer_uv(random_net, sphere_points).coords
    chunked = infer_uv(random_net, PointCloud3(sphere_points), chunk_size=10).coords
    np.testing.assert_allclose(chunked, whole, rtol=1e-12, atol=1e-14)


def test_inference_is_permutation_equivariant(random_net, sphere_points, rng):
    order = rng.permutation(len(sphere_points))
    np.testing.assert_allclose(
        infer_uv(random_net, sphere_points[order]).coords,
        infer_uv(random_net, sphere_points).coords[order],
        rtol=1e-12, atol=1e-14,
    )


def test_surface_normals_of_planar_stub(rng):
    net = init_params(0, hidden_dims=(), embed_dim=4)
    net.wrap.weights[0] = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    net.stitch.weights[0] = np.eye(3)
    normals, degenerate = surface_normals(net, rng.uniform(size=(30, 2)), chunk_size=7)
    np.testing.assert_allclose(normals, np.tile([0.0, 0.0, 1.0], (30, 1)))
    assert not degenerate.any()


# ============================================================================
# METRICS
# ============================================================================

def test_conformality_of_identity_uvs():
    mesh = _planar_mesh()
    assert conformality_metric(mesh, mesh.vertices[:, :2]) == pytest.approx(0.0, abs=1e-12)


def test_conformality_equilateral_vs_right_triangle():
    mesh = TriangleMesh(np.array([[0.0, 0, 0], [1.0, 0, 0], [0.5, math.sqrt(3) / 2, 0]]), np.array([[0, 1, 2]]))
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert conformality_metric(mesh, uv) == pytest.approx(math.radians(20.0), abs=1e-12)


def test_conformality_is_similarity_invariant(rng):
    mesh = icosphere_mesh(1)
    uv = rng.uniform(size=(len(mesh.vertices), 2))
    base = conformality_metric(mesh, uv)

    moved = TriangleMesh(mesh.vertices @ _rotation(rng).T + np.array([1.0, -2.0, 3.0]), mesh.faces)
    angle = 0.7
    rot2 = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    similar = 2.5 * uv @ rot2.T + np.array([4.0, -1.0])
    assert conformality_metric(moved, similar) == pytest.approx(base, abs=1e-10)


def test_conformality_excludes_degenerate_triangles():
    mesh = _planar_mesh()
    vertices = np.vstack([mesh.vertices, [[2.0, 0, 0], [3.0, 0, 0], [4.0, 0, 0]]])
    faces = np.vstack([mesh.faces, [[5, 6, 7]]])
    degenerate = TriangleMesh(vertices, faces)
    diff, excluded = angle_differences(degenerate, vertices[:, :2])
    assert excluded == 1
    assert diff.shape == (4, 3)
    assert 0.0 <= conformality_metric(degenerate, vertices[:, :2]) <= math.pi


def test_conformality_size_mismatch():
    with pytest.raises(AnalysisError):
        conformality_metric(_planar_mesh(), np.zeros((3, 2)))


def test_flip_fraction():
    mesh = _planar_mesh()
    uv = mesh.vertices[:, :2].copy()
    assert flip_fraction(mesh, uv) == 0.0
    # Pull the center across the bottom edge: that triangle flips
    uv[4] = [0.5, -0.5]
    assert flip_fraction(mesh, uv) == 0.25
    mirrored = uv * np.array([-1.0, 1.0])
    assert flip_fraction(mesh, mirrored) == 0.25


def test_overlap_fraction():
    assert uv_overlap_fraction(_lattice(5, 0.1), eps=0.05) == 0.0
    assert uv_overlap_fraction(np.zeros((6, 2)), eps=0.05) == 1.0
    with pytest.raises(AnalysisError):
        uv_overlap_fraction(np.zeros((6, 2)), eps=0.0)


def test_overlap_matches_brute_force(rng):
    uv = rng.uniform(size=(500, 2))
    d = np.linalg.norm(uv[:, None, :] - uv[None, :, :], axis=2)
    np.fill_diagonal(d, np.inf)
    expected = float(np.mean(d.min(axis=1) < 0.02))
    assert uv_overlap_fraction(uv, 0.02) == pytest.approx(expected, abs=1e-12)


def test_jacobian_proxies():
    fu = np.array([[1.0, 0, 0], [2.0, 0, 0]])
    fv = np.array([[0.0, 1, 0], [0.0, 1, 0]])
    # Per point: 0 and 1/3
    assert jacobian_conformality((fu, fv)) == pytest.approx(1.0 / 6.0)
    # Per point: 0 and 1
    assert isometric_residual((fu, fv)) == pytest.approx(0.5)


def test_evaluate_run_with_mesh(random_net):
    mesh = icosphere_mesh(1)
    report, uv, seams = evaluate_run(random_net, mesh.to_cloud(), mesh)
    assert report.num_points == len(mesh.vertices)
    assert report.conformality_source == "mesh"
    assert 0.0 <= report.conformality <= math.pi
    assert 0.0 <= report.flip_fraction <= 0.5
    assert 0.0 <= report.overlap_fraction <= 1.0
    assert report.chamfer >= 0.0
    assert len(uv) == len(mesh.vertices)
    assert report.seam_count == len(seams)


def test_evaluate_run_without_mesh(random_net, sphere_points):
    report, _, _ = evaluate_run(random_net, PointCloud3(sphere_points))
    assert report.conformality_source == "jacobian_proxy"
    assert report.conformality == report.jacobian_conformality
    assert report.flip_fraction is None
    assert set(report.to_dict()) >= {"conformality", "overlap_fraction", "chamfer", "seam_fraction"}

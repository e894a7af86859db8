"""Tests for the five training objectives and their weighted sum."""

import math

import numpy as np
import pytest

from core.autodiff import Jacobian32, Tape
from core.losses import (
    LossError,
    LossSettings,
    LossWeights,
    antiflip_loss,
    combined_antiflip_loss,
    count_close_pairs,
    cycle_loss,
    distortion_loss,
    total_loss,
    unwrap_loss,
    wrap_loss,
)
from core.pipeline import PipelineState, make_grid, run_pipeline


def _jacobian(tape, fu, fv):
    return Jacobian32(tape.input(np.atleast_2d(fu)), tape.input(np.atleast_2d(fv)))


def _brute_unwrap(q, k, eps):
    total = 0.0
    for i in range(len(q)):
        d = np.linalg.norm(q - q[i], axis=1)
        d[i] = np.inf
        for j in np.argsort(d)[:k]:
            total += max(0.0, eps - d[j])
    return total


def _brute_antiflip(points, normals, k, t_angle):
    total = 0.0
    for i in range(len(points)):
        d = np.linalg.norm(points - points[i], axis=1)
        d[i] = np.inf
        for j in np.argsort(d)[:k]:
            cosine = np.clip(np.dot(normals[i], normals[j]), -1.0, 1.0)
            total += max(0.0, math.acos(cosine) - t_angle)
    return total


# ============================================================================
# UNWRAPPING
# ============================================================================

def test_unwrap_inactive_when_spread_out():
    grid = make_grid(16).coords
    assert float(unwrap_loss(grid, k=4, eps=0.1)) == 0.0


def test_unwrap_coincident_pair():
    q = np.array([[0.5, 0.5], [0.5, 0.5]])
    assert float(unwrap_loss(q, k=1, eps=0.2, normalize=False)) == pytest.approx(0.4)


def test_unwrap_matches_brute_force_small(rng):
    q = rng.uniform(0.0, 0.2, size=(5, 2))
    value = float(unwrap_loss(q, k=2, eps=0.1, normalize=False))
    assert value == pytest.approx(_brute_unwrap(q, 2, 0.1), abs=1e-12)


def test_unwrap_matches_brute_force_large(rng):
    q = rng.uniform(size=(500, 2))
    eps = 0.03
    value = float(unwrap_loss(q, k=8, eps=eps, normalize=False))
    assert value == pytest.approx(_brute_unwrap(q, 8, eps), abs=1e-12)
    normalized = float(unwrap_loss(q, k=8, eps=eps))
    assert normalized == pytest.approx(value / (500 * 8), abs=1e-12)


def test_unwrap_scales_with_uv_and_eps(rng):
    q = rng.uniform(size=(40, 2))
    base = float(unwrap_loss(q, k=4, eps=0.1))
    assert float(unwrap_loss(3.0 * q + 7.0, k=4, eps=0.3)) == pytest.approx(3.0 * base, rel=1e-10)


def test_unwrap_rejects_non_positive_eps():
    with pytest.raises(LossError):
        unwrap_loss(np.zeros((3, 2)), k=1, eps=0.0)


def test_count_close_pairs():
    q = np.array([[0.0, 0.0], [0.0, 0.01], [5.0, 5.0]])
    assert count_close_pairs(q, k=1, eps=0.1) == 2


# ============================================================================
# WRAPPING
# ============================================================================

def test_wrap_identical_is_zero(rng):
    p = rng.normal(size=(30, 3))
    assert float(wrap_loss(p, p.copy())) == 0.0


def test_wrap_single_point():
    assert float(wrap_loss(np.array([[0.0, 0, 0]]), np.array([[1.0, 0, 0]]))) == pytest.approx(2.0)


def test_wrap_is_symmetric(rng):
    a = rng.normal(size=(20, 3))
    b = rng.normal(size=(25, 3))
    assert float(wrap_loss(a, b)) == pytest.approx(float(wrap_loss(b, a)), abs=1e-14)


def test_wrap_gradient_moves_points_towards_target():
    tape = Tape()
    p_hat = tape.parameter("p_hat", np.array([[0.0, 0.0, 0.0]]))
    grads = tape.backward(wrap_loss(p_hat, np.array([[1.0, 0.0, 0.0]])))
    # d/dx [(x - 1)^2 + (1 - x)^2] at x = 0
    np.testing.assert_allclose(grads["p_hat"], [[-4.0, 0.0, 0.0]])


# ============================================================================
# CYCLE CONSISTENCY
# ============================================================================

def _cycle_state(rng, offset=(0.0, 0.0, 0.0), permute=None):
    tape = Tape()
    p = rng.normal(size=(10, 3))
    s = rng.normal(size=(10, 3))
    q_hat = rng.normal(size=(8, 2))
    s_hat = rng.normal(size=(8, 3))
    p_cycle = p + np.asarray(offset)
    if permute is not None:
        p, p_cycle, s = p[permute], p_cycle[permute], s[permute]
    return PipelineState(
        tape=tape,
        P=tape.input(p), P_cycle=tape.input(p_cycle),
        S=tape.input(s), S_cycle=tape.input(s.copy()),
        Q_hat=tape.input(q_hat), Q_hat_cycle=tape.input(q_hat.copy()),
        S_hat=tape.input(s_hat), S_hat_cycle=tape.input(s_hat.copy()),
    )


def test_cycle_identical_pairs_is_zero():
    assert float(cycle_loss(_cycle_state(np.random.default_rng(0)))) == 0.0


def test_cycle_mean_over_elements():
    state = _cycle_state(np.random.default_rng(0), offset=(0.1, 0.0, 0.0))
    assert float(cycle_loss(state)) == pytest.approx(0.1 / 3.0, abs=1e-12)


def test_cycle_is_permutation_invariant():
    plain = _cycle_state(np.random.default_rng(4), offset=(0.2, -0.1, 0.05))
    permuted = _cycle_state(np.random.default_rng(4), offset=(0.2, -0.1, 0.05), permute=np.arange(10)[::-1])
    assert float(cycle_loss(plain)) == pytest.approx(float(cycle_loss(permuted)), abs=1e-14)


def test_cycle_shape_mismatch():
    tape = Tape()
    state = PipelineState(tape=tape, P=tape.input(np.zeros((4, 3))), P_cycle=tape.input(np.zeros((5, 3))))
    with pytest.raises(LossError):
        cycle_loss(state)


# ============================================================================
# DISTORTION
# ============================================================================

def test_distortion_isometric_stub_is_zero():
    tape = Tape()
    j = _jacobian(tape, np.tile([1.0, 0, 0], (5, 1)), np.tile([0, 1.0, 0], (5, 1)))
    assert float(distortion_loss([j], "conformal")) == pytest.approx(0.0, abs=1e-14)
    assert float(distortion_loss([j], "isometric")) == pytest.approx(0.0, abs=1e-14)


def test_distortion_uniform_scaling():
    tape = Tape()
    j = _jacobian(tape, np.tile([2.0, 0, 0], (4, 1)), np.tile([0, 2.0, 0], (4, 1)))
    assert float(distortion_loss([j], "conformal")) == pytest.approx(0.0, abs=1e-12)
    assert float(distortion_loss([j], "isometric")) == pytest.approx(2.0)


def test_distortion_anisotropic_point():
    tape = Tape()
    j = _jacobian(tape, [2.0, 0, 0], [0, 1.0, 0])
    assert float(distortion_loss([j], "conformal")) == pytest.approx(1.0)
    assert float(distortion_loss([j], "isometric")) == pytest.approx(1.0)


def test_distortion_pools_both_lists():
    tape = Tape()
    anisotropic = _jacobian(tape, [2.0, 0, 0], [0, 1.0, 0])
    isometric = _jacobian(tape, np.tile([1.0, 0, 0], (3, 1)), np.tile([0, 1.0, 0], (3, 1)))
    # One unit of distortion over four points
    assert float(distortion_loss([anisotropic, isometric], "conformal")) == pytest.approx(0.25)
    assert float(distortion_loss([anisotropic, isometric], "conformal", normalize=False)) == pytest.approx(1.0)


def test_distortion_isometric_zero_implies_conformal_zero(rng):
    rotation, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    tape = Tape()
    j = _jacobian(tape, rotation[:, 0][None, :], rotation[:, 1][None, :])
    assert float(distortion_loss([j], "isometric")) == pytest.approx(0.0, abs=1e-12)
    assert float(distortion_loss([j], "conformal")) == pytest.approx(0.0, abs=1e-12)


def test_distortion_unknown_mode():
    tape = Tape()
    with pytest.raises(LossError):
        distortion_loss([_jacobian(tape, [1.0, 0, 0], [0, 1.0, 0])], "authalic")


# ============================================================================
# ANTI-FLIPPING
# ============================================================================

def test_antiflip_planar_patch_is_zero(rng):
    points = np.column_stack([rng.uniform(size=(20, 2)), np.zeros(20)])
    normals = np.tile([0.0, 0.0, 1.0], (20, 1))
    assert float(antiflip_loss(points, normals, k=4)) == 0.0


def test_antiflip_opposite_normals():
    points = np.array([[0.0, 0, 0], [0.1, 0, 0]])
    normals = np.array([[0.0, 0, 1], [0.0, 0, -1]])
    value = float(antiflip_loss(points, normals, k=1, t_angle=math.pi / 2, normalize=False))
    assert value == pytest.approx(math.pi)


def test_antiflip_matches_brute_force(rng):
    points = rng.uniform(size=(500, 3))
    normals = rng.normal(size=(500, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    value = float(antiflip_loss(points, normals, k=4, t_angle=math.pi / 2, normalize=False))
    assert value == pytest.approx(_brute_antiflip(points, normals, 4, math.pi / 2), abs=1e-9)


def test_antiflip_skips_degenerate_points():
    points = np.array([[0.0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [5.0, 0, 0]])
    normals = np.array([[0.0, 0, 1], [0.0, 0, 1], [0.0, 0, 1], [0.0, 0, -1]])
    degenerate = np.array([False, False, False, True])
    assert float(antiflip_loss(points, normals, k=1, degenerate=degenerate)) == 0.0
    assert float(antiflip_loss(points, normals, k=1)) > 0.0


def test_combined_antiflip_pools_point_counts():
    tape = Tape()
    flipped_points = np.array([[0.0, 0, 0], [0.1, 0, 0]])
    flipped = tape.input(np.array([[0.0, 0, 1], [0.0, 0, -1]]))
    flat_points = np.array([[3.0, 0, 0], [3.1, 0, 0]])
    flat = tape.input(np.array([[0.0, 0, 1], [0.0, 0, 1]]))
    value = float(combined_antiflip_loss([(flipped_points, flipped, None), (flat_points, flat, None)], k=1))
    assert value == pytest.approx(math.pi / 4)


# ============================================================================
# WEIGHTED OBJECTIVE
# ============================================================================

def test_negative_weight_is_rejected():
    with pytest.raises(LossError):
        LossWeights(aflip=-0.01)


def test_total_is_weighted_sum(random_net, sphere_points):
    state = run_pipeline(random_net, sphere_points[:32], make_grid(16))
    weights = LossWeights()
    objective, report = total_loss(state, weights)
    expected = sum(getattr(weights, name) * getattr(report, name) for name in weights.to_dict())
    assert report.total == pytest.approx(expected, rel=1e-12)
    assert float(objective) == pytest.approx(expected, rel=1e-12)
    for name in ("unwrap", "wrap", "cycle", "distortion", "aflip"):
        assert getattr(report, name) >= 0.0


def test_total_arithmetic_with_unit_terms():
    weights = LossWeights(unwrap=0.01, wrap=1.0, cycle=0.01, distortion=0.01, aflip=0.01)
    assert sum(weights.to_dict().values()) == pytest.approx(1.04)


def test_eps_follows_uv_extent(random_net, sphere_points):
    state = run_pipeline(random_net, sphere_points, make_grid(64), branches="3d-only")
    _, report = total_loss(state, settings=LossSettings(eps_factor=0.1))
    q = state.Q.value
    extent = np.max(q.max(axis=0) - q.min(axis=0))
    assert report.eps == pytest.approx(0.1 * extent / 8.0)


def test_zero_weight_removes_gradient(random_net, sphere_points):
    state = run_pipeline(random_net, sphere_points[:32], make_grid(16), branches="3d-only")
    only_unwrap = LossWeights(unwrap=1.0, wrap=0.0, cycle=0.0, distortion=0.0, aflip=0.0)
    objective, _ = total_loss(state, only_unwrap)
    grads = state.tape.backward(objective)
    # Q = Unwrap(Cut(P)) never touches Wrap or Stitch
    assert np.all(grads["wrap.weight0"] == 0.0)
    assert np.all(grads["stitch.weight0"] == 0.0)

    state = run_pipeline(random_net, sphere_points[:32], make_grid(16), branches="3d-only")
    with_distortion = LossWeights(unwrap=1.0, wrap=0.0, cycle=0.0, distortion=1.0, aflip=0.0)
    objective, _ = total_loss(state, with_distortion)
    grads = state.tape.backward(objective)
    assert np.any(grads["wrap.weight0"] != 0.0)


# ============================================================================
# GRADIENT CHECKS
# ============================================================================

EPS_FIXED = 0.05
CHECKED_ENTRIES = [
    ("unwrap.weight0", (0, 0)),
    ("cut_embed.weight1", (1, 2)),
    ("cut_offset.bias2", (0,)),
    ("wrap.weight2", (2, 1)),
    ("stitch.weight1", (3, 4)),
    ("deform_offset.weight0", (1, 0)),
]


def _term(net, points, grid, term):
    state = run_pipeline(net, points, grid)
    if term == "unwrap":
        # eps held fixed so the finite differences see the same hinge
        return state.tape, unwrap_loss(state.Q, 8, EPS_FIXED)
    if term == "wrap":
        return state.tape, wrap_loss(state.P_hat, state.P)
    if term == "cycle":
        return state.tape, cycle_loss(state)
    if term == "distortion":
        return state.tape, distortion_loss([state.J_f, state.J_g], "isometric")
    sets = [
        (state.P_cycle.value[state.index_f], state.n_cycle, state.degenerate_f),
        (state.P_hat.value[state.index_g], state.n_hat, state.degenerate_g),
    ]
    return state.tape, combined_antiflip_loss(sets, k=4, t_angle=0.5)


@pytest.mark.parametrize("term", ["unwrap", "wrap", "cycle", "distortion", "aflip"])
def test_gradients_match_finite_differences(term, random_net, sphere_points):
    points = sphere_points[:32]
    grid = make_grid(16)
    tape, loss = _term(random_net, points, grid, term)
    grads = tape.backward(loss)

    h = 1e-6
    for name, index in CHECKED_ENTRIES:
        values = []
        for sign in (1.0, -1.0):
            net = random_net.copy()
            params = net.parameters()
            params[name] = params[name].copy()
            params[name][index] += sign * h
            net.assign(params)
            values.append(float(_term(net, points, grid, term)[1]))
        numeric = (values[0] - values[1]) / (2 * h)
        analytic = grads[name][index] if name in grads else 0.0
        np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7, err_msg=f"{term}: {name}{index}")

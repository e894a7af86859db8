"""
Losses Module - Training objectives of the cycle mapping.

1. Unwrapping: hinge on UV neighbors closer than eps
2. Wrapping: Chamfer distance between the generated surface and the input
3. Cycle consistency: mean absolute differences of the four round trips
4. Distortion: conformal |s1 - s2| or isometric |s1 - 1| + |s2 - 1|
5. Anti-flipping: hinge on the angle between neighboring normals

Every loss accepts tape nodes (training) or plain arrays (evaluation) and
returns a scalar node. Neighbor assignments are recomputed per call and
treated as constants; distances through them stay differentiable.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Jacobian32, Tape, Var, singular_value_nodes
from .geometry import L_FLOOR, PointCloud3, UvCloud, guarded_side_length, nearest_assignments, self_knn
from .pipeline import PipelineState

logger = logging.getLogger(__name__)

DISTORTION_MODES = ("conformal", "isometric")

ArrayLike = Union[Var, PointCloud3, UvCloud, np.ndarray]


class LossError(ValueError):
    """Raised for invalid loss weights, settings or mismatched operands."""


def _lift(x: ArrayLike, tape: Optional[Tape] = None) -> Var:
    if isinstance(x, Var):
        return x
    if isinstance(x, PointCloud3):
        x = x.points
    elif isinstance(x, UvCloud):
        x = x.coords
    tape = tape if tape is not None else Tape()
    return tape.input(np.asarray(x, dtype=np.float64))


def _zero(tape: Tape) -> Var:
    return tape.input(0.0, name="zero")


def _square(tape: Tape, x: Var) -> Var:
    return tape.apply("mul", x, x)


# ============================================================================
# INDIVIDUAL TERMS
# ============================================================================

def unwrap_loss(
    Q: ArrayLike,
    k: int,
    eps: float,
    normalize: bool = True,
) -> Var:
    """
    Penalize UV points closer than eps to any of their k nearest UV neighbors.

    sum_i sum_k max(0, eps - |q_i - q_i^(k)|), divided by N * k when normalized.
    """
    if eps <= 0.0:
        raise LossError(f"eps must be positive, got {eps}")
    q = _lift(Q)
    tape = q.tape
    n = len(q)
    neighbors = self_knn(q.value, k)
    rows = np.repeat(np.arange(n), k)
    gaps = tape.row_norm(tape.take(q, rows) - tape.take(q, neighbors.ravel()))
    hinge = tape.relu(eps - gaps)
    return tape.mean(hinge) if normalize else tape.sum(hinge)


def count_close_pairs(Q: np.ndarray, k: int, eps: float) -> int:
    """Number of (point, neighbor) pairs with an active unwrapping hinge."""
    q = np.asarray(Q, dtype=np.float64)
    neighbors = self_knn(q, k)
    gaps = np.linalg.norm(q[:, None, :] - q[neighbors], axis=2)
    return int(np.sum(gaps < eps))


def wrap_loss(P_hat: ArrayLike, P: ArrayLike) -> Var:
    """
    Chamfer distance between the generated surface and the input points.

    Squared distances, mean per direction, both directions summed.
    """
    a = _lift(P_hat)
    tape = a.tape
    b = P if isinstance(P, Var) and P.tape is tape else _lift(P.value if isinstance(P, Var) else P, tape)
    if len(a) == 0 or len(b) == 0:
        raise LossError("Chamfer distance of an empty cloud")
    a_to_b, b_to_a = nearest_assignments(a.value, b.value)
    forward = tape.mean(tape.row_sum(_square(tape, a - tape.take(b, a_to_b))))
    backward = tape.mean(tape.row_sum(_square(tape, b - tape.take(a, b_to_a))))
    return forward + backward


def l1_mean(a: Var, b: Var) -> Var:
    """Mean absolute elementwise difference of two same-shape nodes."""
    if a.shape != b.shape:
        raise LossError(f"Cycle pair shape mismatch: {a.shape} vs {b.shape}")
    return a.tape.mean(a.tape.abs(a - b))


def cycle_pairs(state: PipelineState) -> List[Tuple[str, Var, Var]]:
    """The round-trip pairs available in a state (ablated branches drop out)."""
    pairs = [
        ("P", state.P, state.P_cycle),
        ("S", state.S, state.S_cycle),
        ("Q_hat", state.Q_hat, state.Q_hat_cycle),
        ("S_hat", state.S_hat, state.S_hat_cycle),
    ]
    return [(name, a, b) for name, a, b in pairs if a is not None and b is not None]


def cycle_loss(state: PipelineState) -> Var:
    """|P - P_cycle| + |S - S_cycle| + |Q_hat - Q_hat_cycle| + |S_hat - S_hat_cycle|, each a mean."""
    pairs = cycle_pairs(state)
    if not pairs:
        return _zero(state.tape)
    total = None
    for _, a, b in pairs:
        term = l1_mean(a, b)
        total = term if total is None else total + term
    return total


def _distortion_terms(j: Jacobian32, mode: str) -> Var:
    tape = j.fu.tape
    sigma = singular_value_nodes(j)
    if mode == "conformal":
        return tape.abs(tape.column(sigma, 0) - tape.column(sigma, 1))
    return tape.row_sum(tape.abs(sigma - 1.0))


def distortion_loss(
    J_list: Sequence[Optional[Jacobian32]],
    mode: str = "conformal",
    normalize: bool = True,
) -> Var:
    """
    Distortion of the surface maps from their Jacobian singular values.

    conformal: sum |s1 - s2|
    isometric: sum |s1 - 1| + |s2 - 1|

    Summed over every Jacobian list, then divided by the total point count
    when normalized.
    """
    if mode not in DISTORTION_MODES:
        raise LossError(f"Unknown distortion mode '{mode}', expected one of {DISTORTION_MODES}")
    present = [j for j in J_list if j is not None and len(j) > 0]
    if not present:
        raise LossError("distortion_loss needs at least one non-empty Jacobian list")
    tape = present[0].fu.tape

    total = None
    count = 0
    for j in present:
        term = tape.sum(_distortion_terms(j, mode))
        total = term if total is None else total + term
        count += len(j)
    return total * (1.0 / count) if normalize else total


def _antiflip_sum(
    points: ArrayLike,
    normals: Var,
    k: int,
    t_angle: float,
    degenerate: Optional[np.ndarray],
) -> Tuple[Var, int]:
    """Unnormalized anti-flipping sum over one point set and its valid point count."""
    tape = normals.tape
    coords = points.value if isinstance(points, Var) else _lift(points).value
    valid = np.arange(len(coords))
    if degenerate is not None and np.any(degenerate):
        valid = np.flatnonzero(~np.asarray(degenerate, dtype=bool))
    if len(valid) <= k:
        logger.debug(f"Anti-flip skipped: {len(valid)} valid normals for k={k}")
        return _zero(tape), 0

    neighbors = self_knn(coords[valid], k)
    rows = np.repeat(np.arange(len(valid)), k)
    n_valid = normals if len(valid) == len(coords) else tape.take(normals, valid)
    cosine = tape.dot(tape.take(n_valid, rows), tape.take(n_valid, neighbors.ravel()))
    penalty = tape.relu(tape.arccos(cosine) - t_angle)
    return tape.sum(penalty), len(valid)


def antiflip_loss(
    points: ArrayLike,
    normals: ArrayLike,
    k: int = 4,
    t_angle: float = math.pi / 2,
    degenerate: Optional[np.ndarray] = None,
    normalize: bool = True,
) -> Var:
    """
    Penalize neighboring points whose normals differ by more than t_angle.

    sum_i sum_k max(0, arccos(n_i . n_i^(k)) - t_angle) over the k nearest
    spatial neighbors, divided by the number of non-degenerate points when
    normalized. Degenerate normals are skipped.
    """
    normals = _lift(normals)
    total, count = _antiflip_sum(points, normals, k, t_angle, degenerate)
    if normalize and count > 0:
        return total * (1.0 / count)
    return total


def combined_antiflip_loss(
    sets: Sequence[Tuple[ArrayLike, Var, Optional[np.ndarray]]],
    k: int = 4,
    t_angle: float = math.pi / 2,
    normalize: bool = True,
) -> Var:
    """Anti-flipping over several (points, normals, degenerate) sets, pooled by point count."""
    if not sets:
        raise LossError("combined_antiflip_loss needs at least one point set")
    tape = sets[0][1].tape
    total = None
    count = 0
    for points, normals, degenerate in sets:
        term, n = _antiflip_sum(points, normals, k, t_angle, degenerate)
        total = term if total is None else total + term
        count += n
    if normalize and count > 0:
        return total * (1.0 / count)
    return total if total is not None else _zero(tape)


# ============================================================================
# WEIGHTED OBJECTIVE
# ============================================================================

@dataclass
class LossWeights:
    unwrap: float = 0.01
    wrap: float = 1.0
    cycle: float = 0.01
    distortion: float = 0.01
    aflip: float = 0.01

    def __post_init__(self):
        for name, value in self.to_dict().items():
            if value < 0.0:
                raise LossError(f"Loss weight '{name}' must be non-negative, got {value}")

    def to_dict(self) -> Dict[str, float]:
        return {k: float(v) for k, v in asdict(self).items()}


@dataclass
class LossSettings:
    """Neighborhoods and thresholds used by total_loss."""
    k_unwrap: int = 8
    eps_factor: float = 0.1
    l_floor: float = L_FLOOR
    distortion_mode: str = "conformal"
    k_aflip: int = 4
    t_angle: float = math.pi / 2
    normalize: bool = True


@dataclass
class LossReport:
    """Values of every term for one step; total is the weighted sum."""
    unwrap: float = 0.0
    wrap: float = 0.0
    cycle: float = 0.0
    distortion: float = 0.0
    aflip: float = 0.0
    total: float = 0.0
    weights: Dict[str, float] = field(default_factory=dict)
    eps: float = 0.0
    clipped: int = 0
    degenerate: int = 0

    def to_dict(self) -> Dict:
        return asdict(self)


TERMS = ("unwrap", "wrap", "cycle", "distortion", "aflip")


def total_loss(
    state: PipelineState,
    weights: Optional[LossWeights] = None,
    settings: Optional[LossSettings] = None,
) -> Tuple[Var, LossReport]:
    """
    Weighted objective of one pipeline state.

    eps = eps_factor * L(Q) / sqrt(N) is recomputed from the current Q and
    held constant. A term with weight 0 stays out of the objective, so it
    contributes no gradient.

    Returns:
        (scalar objective node, LossReport)
    """
    weights = weights or LossWeights()
    settings = settings or LossSettings()
    tape = state.tape
    terms: Dict[str, Var] = {}
    report = LossReport(weights=weights.to_dict(), degenerate=state.degenerate_count)

    if state.Q is not None:
        n = len(state.Q)
        report.eps = settings.eps_factor * guarded_side_length(state.Q.value, settings.l_floor) / math.sqrt(n)
        terms["unwrap"] = unwrap_loss(state.Q, settings.k_unwrap, report.eps, settings.normalize)
        report.clipped = count_close_pairs(state.Q.value, settings.k_unwrap, report.eps)
    else:
        terms["unwrap"] = _zero(tape)

    terms["wrap"] = wrap_loss(state.P_hat, state.P) if state.P_hat is not None else _zero(tape)
    terms["cycle"] = cycle_loss(state)

    jacobians = [state.J_f, state.J_g]
    if any(j is not None for j in jacobians):
        terms["distortion"] = distortion_loss(jacobians, settings.distortion_mode, settings.normalize)
    else:
        terms["distortion"] = _zero(tape)

    sets = []
    if state.n_cycle is not None:
        sets.append((state.P_cycle.value[state.index_f], state.n_cycle, state.degenerate_f))
    if state.n_hat is not None:
        sets.append((state.P_hat.value[state.index_g], state.n_hat, state.degenerate_g))
    terms["aflip"] = (
        combined_antiflip_loss(sets, settings.k_aflip, settings.t_angle, settings.normalize)
        if sets else _zero(tape)
    )

    objective = _zero(tape)
    total = 0.0
    for name in TERMS:
        value = float(terms[name])
        setattr(report, name, value)
        weight = getattr(weights, name)
        if weight > 0.0:
            objective = objective + terms[name] * weight
            total += weight * value
    report.total = total
    return objective, report

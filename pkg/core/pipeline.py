"""
Pipeline Module - One forward pass of the bi-directional cycle mapping.

3D -> 2D -> 3D branch:  S = Cut(P),  Q = Unwrap(S),  S_cycle = Wrap(Q),  P_cycle = Stitch(S_cycle)
2D -> 3D -> 2D branch:  Q_hat = Deform(G),  S_hat = Wrap(Q_hat),  P_hat = Stitch(S_hat),
                        S_hat_cycle = Cut(P_hat),  Q_hat_cycle = Unwrap(S_hat_cycle)

Both branches are recorded on a single tape and share one parameter node per
buffer, so a single backward pass accumulates the gradients of both.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from .autodiff import DEGENERACY_FLOOR, DualPoint2, Jacobian32, Tape, Var, normal_from_jacobian
from .geometry import PointCloud3, UvCloud
from .networks import SubNetworkSet

logger = logging.getLogger(__name__)

BRANCHES = ("both", "3d-only", "2d-only")
DEFAULT_JACOBIAN_POINTS = 4096


class PipelineError(RuntimeError):
    """Raised when a stage of the cycle mapping produces non-finite values."""

    def __init__(self, stage: str, count: int):
        super().__init__(f"Stage {stage} produced {count} non-finite values")
        self.stage = stage


CloudLike = Union[PointCloud3, UvCloud, np.ndarray, Var]


@dataclass
class PipelineState:
    """
    Every intermediate of one step. Members of an ablated branch stay None.

    Row i of Q corresponds to row i of P, S, S_cycle and P_cycle; row i of G
    corresponds to row i of Q_hat, S_hat, P_hat, S_hat_cycle and Q_hat_cycle.
    """
    tape: Tape
    P: Optional[Var] = None
    S: Optional[Var] = None
    Q: Optional[Var] = None
    S_cycle: Optional[Var] = None
    P_cycle: Optional[Var] = None
    G: Optional[Var] = None
    Q_hat: Optional[Var] = None
    S_hat: Optional[Var] = None
    P_hat: Optional[Var] = None
    S_hat_cycle: Optional[Var] = None
    Q_hat_cycle: Optional[Var] = None
    J_f: Optional[Jacobian32] = None
    J_g: Optional[Jacobian32] = None
    n_cycle: Optional[Var] = None
    n_hat: Optional[Var] = None
    index_f: Optional[np.ndarray] = None
    index_g: Optional[np.ndarray] = None
    degenerate_f: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    degenerate_g: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def has_3d_branch(self) -> bool:
        return self.Q is not None

    @property
    def has_2d_branch(self) -> bool:
        return self.Q_hat is not None

    @property
    def degenerate_count(self) -> int:
        return int(self.degenerate_f.sum() + self.degenerate_g.sum())


@dataclass
class BranchJacobians:
    """Jacobians of Stitch o Wrap and the normals derived from them."""
    J_f: Optional[Jacobian32]
    J_g: Optional[Jacobian32]
    n_cycle: Optional[Var]
    n_hat: Optional[Var]
    index_f: Optional[np.ndarray]
    index_g: Optional[np.ndarray]
    degenerate_f: np.ndarray
    degenerate_g: np.ndarray


def make_grid(n: int) -> UvCloud:
    """
    Regular lattice over [-1, 1]^2.

    Builds a ceil(sqrt(n)) x ceil(sqrt(n)) lattice (u-major order) and keeps
    the first n points.
    """
    if n < 4:
        raise ValueError(f"Grid needs at least 4 points, got {n}")
    side = int(np.ceil(np.sqrt(n)))
    axis = np.linspace(-1.0, 1.0, side)
    uu, vv = np.meshgrid(axis, axis, indexing="ij")
    coords = np.stack([uu.ravel(), vv.ravel()], axis=1)
    return UvCloud(coords[:n])


def _check_finite(stage: str, value: Var) -> Var:
    bad = ~np.isfinite(value.value)
    if np.any(bad):
        raise PipelineError(stage, int(bad.sum()))
    return value


def _lift(tape: Tape, x: CloudLike, name: str) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError(f"{name} belongs to another tape")
        return x
    if isinstance(x, PointCloud3):
        x = x.points
    elif isinstance(x, UvCloud):
        x = x.coords
    return tape.input(np.asarray(x, dtype=np.float64), name=name)


def forward_3d_branch(
    net: SubNetworkSet,
    P: CloudLike,
    tape: Optional[Tape] = None,
) -> Tuple[Var, Var, Var, Var]:
    """
    Record the 3D -> 2D -> 3D branch.

    Returns:
        (S, Q, S_cycle, P_cycle) as nodes of the tape
    """
    tape = tape if tape is not None else (P.tape if isinstance(P, Var) else Tape())
    p = _lift(tape, P, "P")
    S = _check_finite("Cut-Net", net.cut(tape, p))
    Q = _check_finite("Unwrap-Net", net.unwrap_net(tape, S))
    S_cycle = _check_finite("Wrap-Net", net.wrap_net(tape, Q))
    P_cycle = _check_finite("Stitch-Net", net.stitch_net(tape, S_cycle))
    return S, Q, S_cycle, P_cycle


def forward_2d_branch(
    net: SubNetworkSet,
    G: CloudLike,
    tape: Optional[Tape] = None,
) -> Tuple[Var, Var, Var, Var, Var]:
    """
    Record the 2D -> 3D -> 2D branch.

    Returns:
        (Q_hat, S_hat, P_hat, S_hat_cycle, Q_hat_cycle) as nodes of the tape
    """
    tape = tape if tape is not None else (G.tape if isinstance(G, Var) else Tape())
    g = _lift(tape, G, "G")
    Q_hat = _check_finite("Deform-Net", net.deform(tape, g))
    S_hat = _check_finite("Wrap-Net", net.wrap_net(tape, Q_hat))
    P_hat = _check_finite("Stitch-Net", net.stitch_net(tape, S_hat))
    S_hat_cycle = _check_finite("Cut-Net", net.cut(tape, P_hat))
    Q_hat_cycle = _check_finite("Unwrap-Net", net.unwrap_net(tape, S_hat_cycle))
    return Q_hat, S_hat, P_hat, S_hat_cycle, Q_hat_cycle


def _jacobian_index(n: int, max_points: Optional[int], rng: Optional[np.random.Generator]) -> np.ndarray:
    if max_points is None or n <= max_points:
        return np.arange(n)
    rng = rng if rng is not None else np.random.default_rng(0)
    return np.sort(rng.choice(n, size=max_points, replace=False))


def _surface_jacobian(
    net: SubNetworkSet,
    tape: Tape,
    uv: Var,
    index: np.ndarray,
    floor: float,
) -> Tuple[Jacobian32, Var, np.ndarray]:
    subset = uv if len(index) == len(uv) else tape.take(uv, index)
    dual = DualPoint2.seed(subset)
    out = net.stitch_net(tape, net.wrap_net(tape, dual))
    j = Jacobian32(out.tangents[0], out.tangents[1])
    _check_finite("Jacobian", j.fu)
    _check_finite("Jacobian", j.fv)
    normals, degenerate = normal_from_jacobian(j, floor)
    return j, normals, degenerate


def compute_branch_jacobians(
    net: SubNetworkSet,
    Q: Optional[CloudLike],
    Q_hat: Optional[CloudLike],
    tape: Optional[Tape] = None,
    max_points: Optional[int] = DEFAULT_JACOBIAN_POINTS,
    rng: Optional[np.random.Generator] = None,
    floor: float = DEGENERACY_FLOOR,
) -> BranchJacobians:
    """
    Jacobians of f = Stitch o Wrap at Q and of g = Stitch o Wrap at Q_hat.

    The evaluation points are tape nodes, so the Jacobians and normals stay
    differentiable with respect to every parameter that produced them.
    When a cloud has more than max_points rows, a random subset is used.
    """
    if tape is None:
        anchor = Q if isinstance(Q, Var) else Q_hat
        tape = anchor.tape if isinstance(anchor, Var) else Tape()

    J_f = J_g = n_cycle = n_hat = index_f = index_g = None
    degenerate_f = np.zeros(0, dtype=bool)
    degenerate_g = np.zeros(0, dtype=bool)

    if Q is not None:
        q = _lift(tape, Q, "Q")
        index_f = _jacobian_index(len(q), max_points, rng)
        J_f, n_cycle, degenerate_f = _surface_jacobian(net, tape, q, index_f, floor)
    if Q_hat is not None:
        q_hat = _lift(tape, Q_hat, "Q_hat")
        index_g = _jacobian_index(len(q_hat), max_points, rng)
        J_g, n_hat, degenerate_g = _surface_jacobian(net, tape, q_hat, index_g, floor)

    return BranchJacobians(J_f, J_g, n_cycle, n_hat, index_f, index_g, degenerate_f, degenerate_g)


def run_pipeline(
    net: SubNetworkSet,
    P: Optional[CloudLike],
    G: Optional[CloudLike],
    branches: str = "both",
    jacobian_points: Optional[int] = DEFAULT_JACOBIAN_POINTS,
    rng: Optional[np.random.Generator] = None,
    floor: float = DEGENERACY_FLOOR,
) -> PipelineState:
    """
    Record a complete step: the enabled branches plus their Jacobians.

    Args:
        net: Sub-networks shared by both branches
        P: Input points (normalized, possibly perturbed)
        G: Pre-defined UV grid
        branches: 'both', '3d-only' or '2d-only'
        jacobian_points: Per-branch cap on Jacobian evaluation points
        rng: Generator for the Jacobian subsample
        floor: Cross-product norm below which a normal is degenerate

    Returns:
        PipelineState holding every intermediate as a tape node
    """
    if branches not in BRANCHES:
        raise ValueError(f"Unknown branch setting '{branches}', expected one of {BRANCHES}")

    tape = Tape()
    state = PipelineState(tape=tape)

    # The input cloud is also the wrap-loss target, so it is recorded either way
    if P is not None:
        state.P = _lift(tape, P, "P")
    if branches in ("both", "3d-only"):
        state.S, state.Q, state.S_cycle, state.P_cycle = forward_3d_branch(net, state.P, tape)
    if branches in ("both", "2d-only"):
        state.G = _lift(tape, G, "G")
        (state.Q_hat, state.S_hat, state.P_hat,
         state.S_hat_cycle, state.Q_hat_cycle) = forward_2d_branch(net, state.G, tape)

    jac = compute_branch_jacobians(
        net, state.Q, state.Q_hat, tape=tape,
        max_points=jacobian_points, rng=rng, floor=floor,
    )
    state.J_f, state.J_g = jac.J_f, jac.J_g
    state.n_cycle, state.n_hat = jac.n_cycle, jac.n_hat
    state.index_f, state.index_g = jac.index_f, jac.index_g
    state.degenerate_f, state.degenerate_g = jac.degenerate_f, jac.degenerate_g
    return state

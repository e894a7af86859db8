"""
Autodiff Module - Tape-based differentiation over float64 numpy buffers.

Every training objective is recorded on a Tape as an append-only sequence of
primitive operations. Reverse mode walks the tape backwards to produce the
gradient of a scalar root with respect to every registered parameter.

Forward-mode Jacobians of 2D -> 3D maps are obtained by pushing two tangent
columns (one per input coordinate u, v) through the same primitives. Because
the tangents themselves live on the tape, the Jacobian stays differentiable
for the distortion and anti-flipping objectives.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# Cross-product norms below this are treated as degenerate normals
DEGENERACY_FLOOR = 1e-12
# sqrt'(x) is taken as 0 at or below this value
SQRT_FLOOR = 1e-24
# Lower bound on 1 - c^2 inside arccos'(c)
ARCCOS_FLOOR = 1e-8

LEAKY_SLOPE = 0.01


class UnsupportedPrimitiveError(ValueError):
    """Raised when a computation asks the tape for an unknown primitive."""

    def __init__(self, primitive: str):
        super().__init__(f"Unsupported tape primitive: {primitive}")
        self.primitive = primitive


class TapeError(RuntimeError):
    """Raised on malformed tape usage (non-scalar root, foreign nodes...)."""


# ============================================================================
# PRIMITIVES
# ============================================================================

@dataclass(frozen=True)
class Primitive:
    """
    A differentiable operation the tape knows how to record.

    forward(*inputs, **attrs) -> value
    vjp(grad, value, *inputs, **attrs) -> one gradient (or None) per input
    """
    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Tuple[Optional[np.ndarray], ...]]


PRIMITIVES: Dict[str, Primitive] = {}


def register_primitive(name: str, forward: Callable, vjp: Callable) -> None:
    PRIMITIVES[name] = Primitive(name=name, forward=forward, vjp=vjp)


def _affine_vjp(g, out, x, w, b):
    return g @ w, g.T @ x, g.sum(axis=0)


def _linear_vjp(g, out, x, w):
    return g @ w, g.T @ x


def _leaky_mask(x: np.ndarray, slope: float) -> np.ndarray:
    # Derivative at exactly 0 is the positive-side slope
    return np.where(x >= 0.0, 1.0, slope)


def _concat_vjp(g, out, a, b):
    split = a.shape[1]
    return g[:, :split], g[:, split:]


def _sum_vjp(g, out, x):
    return (np.full_like(x, g),)


def _mean_vjp(g, out, x):
    return (np.full_like(x, g / x.size),)


def _row_norm_forward(x):
    return np.sqrt(np.sum(x * x, axis=1))


def _row_norm_vjp(g, out, x):
    safe = np.where(out > 0.0, out, 1.0)
    scale = np.where(out > 0.0, g / safe, 0.0)
    return (x * scale[:, None],)


def _cross_vjp(g, out, a, b):
    return np.cross(b, g), np.cross(g, a)


def _normalize_forward(x, floor):
    norms = np.sqrt(np.sum(x * x, axis=1))
    return x / np.maximum(norms, floor)[:, None]


def _normalize_vjp(g, out, x, floor):
    norms = np.sqrt(np.sum(x * x, axis=1))
    safe = np.maximum(norms, floor)
    radial = np.sum(out * g, axis=1)
    projected = (g - out * radial[:, None]) / safe[:, None]
    below = norms <= floor
    if np.any(below):
        projected[below] = g[below] / floor
    return (projected,)


def _sqrt_forward(x):
    return np.sqrt(np.maximum(x, 0.0))


def _sqrt_vjp(g, out, x):
    active = x > SQRT_FLOOR
    safe = np.where(active, out, 1.0)
    return (np.where(active, 0.5 * g / safe, 0.0),)


def _arccos_forward(x):
    return np.arccos(np.clip(x, -1.0, 1.0))


def _arccos_vjp(g, out, x):
    c = np.clip(x, -1.0, 1.0)
    inside = np.abs(x) <= 1.0
    denom = np.sqrt(np.maximum(1.0 - c * c, ARCCOS_FLOOR))
    return (np.where(inside, -g / denom, 0.0),)


def _sym_eig2_forward(e, f, g):
    """Closed-form eigenvalues of [[e, f], [f, g]], sorted descending."""
    mean = 0.5 * (e + g)
    half_diff = 0.5 * (e - g)
    disc = np.maximum(half_diff * half_diff + f * f, 0.0)
    radius = np.sqrt(disc)
    return np.stack([mean + radius, mean - radius], axis=1)


def _sym_eig2_vjp(grad, out, e, f, g):
    radius = 0.5 * (out[:, 0] - out[:, 1])
    active = radius > 0.0
    safe = np.where(active, radius, 1.0)
    # d radius / d(e, f, g); zero when eigenvalues coincide
    dr_de = np.where(active, 0.25 * (e - g) / safe, 0.0)
    dr_df = np.where(active, f / safe, 0.0)
    g1, g2 = grad[:, 0], grad[:, 1]
    ge = 0.5 * (g1 + g2) + dr_de * (g1 - g2)
    gg = 0.5 * (g1 + g2) - dr_de * (g1 - g2)
    gf = dr_df * (g1 - g2)
    return ge, gf, gg


def _take_vjp(g, out, x, index):
    gx = np.zeros_like(x)
    np.add.at(gx, index, g)
    return (gx,)


def _column_vjp(g, out, x, j):
    gx = np.zeros_like(x)
    gx[:, j] = g
    return (gx,)


register_primitive(
    "affine",
    lambda x, w, b: x @ w.T + b,
    _affine_vjp,
)
register_primitive(
    "linear",
    lambda x, w: x @ w.T,
    _linear_vjp,
)
register_primitive(
    "leaky_relu",
    lambda x, slope=LEAKY_SLOPE: np.where(x >= 0.0, x, slope * x),
    lambda g, out, x, slope=LEAKY_SLOPE: (g * _leaky_mask(x, slope),),
)
register_primitive(
    "scale",
    lambda x, factor: x * factor,
    lambda g, out, x, factor: (g * factor,),
)
register_primitive(
    "shift",
    lambda x, offset: x + offset,
    lambda g, out, x, offset: (g,),
)
register_primitive(
    "concat",
    lambda a, b: np.concatenate([a, b], axis=1),
    _concat_vjp,
)
register_primitive("add", lambda a, b: a + b, lambda g, out, a, b: (g, g))
register_primitive("sub", lambda a, b: a - b, lambda g, out, a, b: (g, -g))
register_primitive("mul", lambda a, b: a * b, lambda g, out, a, b: (g * b, g * a))
register_primitive(
    "abs",
    np.abs,
    # |x|' at 0 is 0
    lambda g, out, x: (g * np.sign(x),),
)
register_primitive(
    "relu",
    lambda x: np.maximum(x, 0.0),
    # max(0, x)' at 0 is 0
    lambda g, out, x: (np.where(x > 0.0, g, 0.0),),
)
register_primitive("sum", lambda x: np.asarray(np.sum(x)), _sum_vjp)
register_primitive("mean", lambda x: np.asarray(np.mean(x)), _mean_vjp)
register_primitive(
    "row_sum",
    lambda x: np.sum(x, axis=1),
    lambda g, out, x: (np.broadcast_to(g[:, None], x.shape).copy(),),
)
register_primitive("row_norm", _row_norm_forward, _row_norm_vjp)
register_primitive(
    "dot",
    lambda a, b: np.sum(a * b, axis=1),
    lambda g, out, a, b: (g[:, None] * b, g[:, None] * a),
)
register_primitive("cross", lambda a, b: np.cross(a, b), _cross_vjp)
register_primitive("normalize", _normalize_forward, _normalize_vjp)
register_primitive("sqrt", _sqrt_forward, _sqrt_vjp)
register_primitive("arccos", _arccos_forward, _arccos_vjp)
register_primitive("sym_eig2", _sym_eig2_forward, _sym_eig2_vjp)
register_primitive("take", lambda x, index: x[index], _take_vjp)
register_primitive("column", lambda x, j: x[:, j].copy(), _column_vjp)


# ============================================================================
# TAPE
# ============================================================================

@dataclass
class Node:
    """One recorded operation. Leaves use the pseudo-primitives input/parameter."""
    primitive: str
    parents: Tuple[int, ...]
    attrs: Dict[str, Any]
    name: Optional[str] = None


class Var:
    """Handle to a node value on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __len__(self) -> int:
        return self.value.shape[0]

    def __float__(self) -> float:
        if self.value.size != 1:
            raise TapeError(f"Cannot convert node of shape {self.shape} to float")
        return float(self.value.reshape(()))

    def __add__(self, other):
        if isinstance(other, Var):
            return self.tape.apply("add", self, other)
        return self.tape.apply("shift", self, offset=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Var):
            return self.tape.apply("sub", self, other)
        return self.tape.apply("shift", self, offset=-float(other))

    def __rsub__(self, other):
        return self.tape.apply("shift", -self, offset=float(other))

    def __mul__(self, other):
        if isinstance(other, Var):
            return self.tape.apply("mul", self, other)
        return self.tape.apply("scale", self, factor=other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.apply("scale", self, factor=-1.0)

    def __repr__(self):
        node = self.tape.nodes[self.index]
        return f"Var({node.primitive}#{self.index}, shape={self.shape})"


class Tape:
    """
    Append-only record of primitive operations.

    Nodes are appended in execution order, so the reverse of the node list is
    a valid reverse topological order for the backward pass.

    Usage:
        tape = Tape()
        w = tape.parameter("w", np.array([3.0]))
        loss = tape.sum(w * w)
        grads = tape.backward(loss)   # {"w": array([6.])}
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.values: List[np.ndarray] = []
        self.adjoints: List[Optional[np.ndarray]] = []
        self.parameters: Dict[str, int] = {}
        self.root: Optional[Var] = None

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node, value: np.ndarray) -> Var:
        self.nodes.append(node)
        self.values.append(value)
        self.adjoints.append(None)
        return Var(self, len(self.nodes) - 1)

    def input(self, value: Any, name: Optional[str] = None) -> Var:
        """Record a constant leaf (inputs, seeds, frozen targets)."""
        array = np.array(value, dtype=np.float64)
        return self._append(Node("input", (), {}, name), array)

    def parameter(self, name: str, value: np.ndarray) -> Var:
        """
        Register a trainable leaf.

        Registering the same name twice returns the existing node, so every
        consumer of a parameter shares one node and one adjoint.
        """
        if name in self.parameters:
            index = self.parameters[name]
            if self.values[index] is not value:
                raise TapeError(f"Parameter {name} registered with two different buffers")
            return Var(self, index)
        array = np.asarray(value, dtype=np.float64)
        var = self._append(Node("parameter", (), {}, name), array)
        self.parameters[name] = var.index
        return var

    def apply(self, primitive: str, *args: Var, **attrs: Any) -> Var:
        """Record one primitive application and compute its value."""
        if primitive not in PRIMITIVES:
            raise UnsupportedPrimitiveError(primitive)
        for arg in args:
            if not isinstance(arg, Var) or arg.tape is not self:
                raise TapeError(f"{primitive}: argument is not a node of this tape")
        spec = PRIMITIVES[primitive]
        value = spec.forward(*(self.values[a.index] for a in args), **attrs)
        return self._append(
            Node(primitive, tuple(a.index for a in args), dict(attrs)),
            np.asarray(value, dtype=np.float64),
        )

    # ------------------------------------------------------------------
    # Convenience wrappers
    # ------------------------------------------------------------------

    def affine(self, x: Var, w: Var, b: Optional[Var] = None) -> Var:
        if b is None:
            return self.apply("linear", x, w)
        return self.apply("affine", x, w, b)

    def leaky_relu(self, x: Var, slope: float = LEAKY_SLOPE) -> Var:
        return self.apply("leaky_relu", x, slope=slope)

    def concat(self, a: Var, b: Var) -> Var:
        return self.apply("concat", a, b)

    def scale(self, x: Var, factor: Union[float, np.ndarray]) -> Var:
        return self.apply("scale", x, factor=factor)

    def abs(self, x: Var) -> Var:
        return self.apply("abs", x)

    def relu(self, x: Var) -> Var:
        return self.apply("relu", x)

    def sum(self, x: Var) -> Var:
        return self.apply("sum", x)

    def mean(self, x: Var) -> Var:
        return self.apply("mean", x)

    def row_sum(self, x: Var) -> Var:
        return self.apply("row_sum", x)

    def row_norm(self, x: Var) -> Var:
        return self.apply("row_norm", x)

    def dot(self, a: Var, b: Var) -> Var:
        return self.apply("dot", a, b)

    def cross(self, a: Var, b: Var) -> Var:
        return self.apply("cross", a, b)

    def normalize(self, x: Var, floor: float = DEGENERACY_FLOOR) -> Var:
        return self.apply("normalize", x, floor=floor)

    def sqrt(self, x: Var) -> Var:
        return self.apply("sqrt", x)

    def arccos(self, x: Var) -> Var:
        return self.apply("arccos", x)

    def sym_eig2(self, e: Var, f: Var, g: Var) -> Var:
        return self.apply("sym_eig2", e, f, g)

    def take(self, x: Var, index: np.ndarray) -> Var:
        return self.apply("take", x, index=np.asarray(index, dtype=np.int64))

    def column(self, x: Var, j: int) -> Var:
        return self.apply("column", x, j=j)

    # ------------------------------------------------------------------
    # Passes
    # ------------------------------------------------------------------

    def backward(self, root: Optional[Var] = None) -> Dict[str, np.ndarray]:
        """
        Reverse pass from a scalar root.

        Returns:
            Gradient of the root with respect to every registered parameter
            (zeros for parameters the root does not depend on).
        """
        root = root if root is not None else self.root
        if root is None:
            raise TapeError("No root node to differentiate")
        if root.tape is not self:
            raise TapeError("Root node belongs to another tape")
        if self.values[root.index].size != 1:
            raise TapeError(f"Backward requires a scalar root, got shape {root.shape}")

        self.adjoints = [None] * len(self.nodes)
        self.adjoints[root.index] = np.ones_like(self.values[root.index])

        for index in range(root.index, -1, -1):
            grad = self.adjoints[index]
            node = self.nodes[index]
            if grad is None or not node.parents:
                continue
            inputs = [self.values[p] for p in node.parents]
            parent_grads = PRIMITIVES[node.primitive].vjp(
                grad, self.values[index], *inputs, **node.attrs
            )
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent_grad is None:
                    continue
                if self.adjoints[parent] is None:
                    self.adjoints[parent] = np.array(parent_grad, dtype=np.float64)
                else:
                    self.adjoints[parent] = self.adjoints[parent] + parent_grad

        gradients = {}
        for name, index in self.parameters.items():
            adjoint = self.adjoints[index]
            gradients[name] = adjoint if adjoint is not None else np.zeros_like(self.values[index])
        return gradients

    def replay(self) -> List[np.ndarray]:
        """Recompute every node value from the recorded leaves."""
        replayed: List[np.ndarray] = []
        for index, node in enumerate(self.nodes):
            if not node.parents:
                replayed.append(self.values[index])
                continue
            spec = PRIMITIVES[node.primitive]
            value = spec.forward(*(replayed[p] for p in node.parents), **node.attrs)
            replayed.append(np.asarray(value, dtype=np.float64))
        return replayed


def record_forward(
    builder: Callable[..., Var],
    inputs: Union[Sequence[Any], Dict[str, Any]],
) -> Tape:
    """
    Record a computation on a fresh tape.

    Args:
        builder: Called as builder(tape, *input_vars); returns the final node
        inputs: Numeric buffers, either positional or keyed by name

    Returns:
        Tape whose root is the builder's result
    """
    tape = Tape()
    if isinstance(inputs, dict):
        input_vars = [tape.input(value, name=name) for name, value in inputs.items()]
    else:
        input_vars = [tape.input(value) for value in inputs]
    tape.root = builder(tape, *input_vars)
    return tape


def backward(tape: Tape) -> Dict[str, np.ndarray]:
    """Gradient map of the tape's scalar root."""
    return tape.backward()


# ============================================================================
# FORWARD MODE
# ============================================================================

@dataclass
class DualPoint2:
    """
    A value together with its derivatives along the two input coordinates.

    tangents[0] holds d value / du, tangents[1] holds d value / dv. Both
    tangents are tape nodes so that anything computed from them is
    differentiable in reverse mode.
    """
    value: Var
    tangents: Tuple[Var, Var]

    @classmethod
    def seed(cls, uv: Var) -> "DualPoint2":
        """Seed raw UV inputs with the 2x2 identity."""
        tape = uv.tape
        n = uv.shape[0]
        du = np.zeros((n, 2))
        du[:, 0] = 1.0
        dv = np.zeros((n, 2))
        dv[:, 1] = 1.0
        return cls(uv, (tape.input(du, "seed_u"), tape.input(dv, "seed_v")))

    @property
    def tape(self) -> Tape:
        return self.value.tape

    def affine(self, w: Var, b: Optional[Var] = None) -> "DualPoint2":
        tape = self.tape
        return DualPoint2(
            tape.affine(self.value, w, b),
            tuple(tape.affine(t, w) for t in self.tangents),
        )

    def leaky_relu(self, slope: float = LEAKY_SLOPE) -> "DualPoint2":
        tape = self.tape
        # The derivative mask is piecewise constant in the pre-activation
        mask = _leaky_mask(self.value.value, slope)
        return DualPoint2(
            tape.leaky_relu(self.value, slope),
            tuple(tape.scale(t, mask) for t in self.tangents),
        )

    def add(self, other: "DualPoint2") -> "DualPoint2":
        return DualPoint2(
            self.value + other.value,
            tuple(a + b for a, b in zip(self.tangents, other.tangents)),
        )

    def concat(self, other: "DualPoint2") -> "DualPoint2":
        tape = self.tape
        return DualPoint2(
            tape.concat(self.value, other.value),
            tuple(tape.concat(a, b) for a, b in zip(self.tangents, other.tangents)),
        )


@dataclass
class Jacobian32:
    """
    Per-point Jacobians of a 2D -> 3D map.

    fu and fv are (N, 3) tape nodes holding the columns d output / du and
    d output / dv.
    """
    fu: Var
    fv: Var

    def __len__(self) -> int:
        return self.fu.shape[0]

    @property
    def columns(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.fu.value, self.fv.value

    def matrix(self) -> np.ndarray:
        """Numeric Jacobians of shape (N, 3, 2)."""
        return np.stack([self.fu.value, self.fv.value], axis=2)

    def take(self, index: np.ndarray) -> "Jacobian32":
        tape = self.fu.tape
        return Jacobian32(tape.take(self.fu, index), tape.take(self.fv, index))


JacobianMap = Callable[[Tape, DualPoint2], DualPoint2]


def jacobian_2d_to_3d(map_fn: JacobianMap, uv: np.ndarray) -> Jacobian32:
    """
    Exact forward-mode Jacobian of a composite 2D -> 3D map.

    Args:
        map_fn: Called as map_fn(tape, dual) and returns the propagated dual
        uv: A single 2-vector or an (N, 2) array of evaluation points

    Returns:
        Jacobian32 with (N, 3) columns
    """
    tape = Tape()
    points = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    dual = DualPoint2.seed(tape.input(points, "uv"))
    out = map_fn(tape, dual)
    if out.value.shape[1] != 3:
        raise TapeError(f"Jacobian map must produce 3 outputs, got {out.value.shape[1]}")
    return Jacobian32(out.tangents[0], out.tangents[1])


def _as_columns(j: Union[Jacobian32, Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(j, Jacobian32):
        fu, fv = j.columns
    else:
        fu, fv = j
    return np.atleast_2d(np.asarray(fu, dtype=np.float64)), np.atleast_2d(np.asarray(fv, dtype=np.float64))


def singular_values_3x2(
    j: Union[Jacobian32, Tuple[np.ndarray, np.ndarray]]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Singular values of 3x2 Jacobians via the closed-form eigenvalues of J^T J.

    Returns:
        (sigma1, sigma2) arrays of shape (N,), sigma1 >= sigma2 >= 0
    """
    fu, fv = _as_columns(j)
    e = np.sum(fu * fu, axis=1)
    f = np.sum(fu * fv, axis=1)
    g = np.sum(fv * fv, axis=1)
    eig = _sym_eig2_forward(e, f, g)
    sigma = np.sqrt(np.maximum(eig, 0.0))
    return sigma[:, 0], sigma[:, 1]


def singular_value_nodes(j: Jacobian32) -> Var:
    """Differentiable (N, 2) singular values, columns sorted descending."""
    tape = j.fu.tape
    e = tape.dot(j.fu, j.fu)
    f = tape.dot(j.fu, j.fv)
    g = tape.dot(j.fv, j.fv)
    return tape.sqrt(tape.sym_eig2(e, f, g))


def normal_from_jacobian(
    j: Jacobian32,
    floor: float = DEGENERACY_FLOOR,
) -> Tuple[Var, np.ndarray]:
    """
    Unit normals (f_u x f_v) / |f_u x f_v|.

    Returns:
        (normals node of shape (N, 3), boolean degenerate mask)
    """
    tape = j.fu.tape
    crossed = tape.cross(j.fu, j.fv)
    norms = np.linalg.norm(crossed.value, axis=1)
    degenerate = norms < floor
    if np.any(degenerate):
        logger.debug(f"{int(degenerate.sum())} degenerate Jacobians (|fu x fv| < {floor})")
    return tape.normalize(crossed, floor), degenerate

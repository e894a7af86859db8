"""
Networks Module - The five point-wise sub-networks of the cycle mapping.

Every sub-network is built from MlpStack: a sequence of shared point-wise
affine layers with LeakyReLU after every layer except the last, and no
normalization layers.

    Deform-Net  2 -> 2   residual: offset([embed(x); x]) + x
    Cut-Net     3 -> 3   residual: offset([embed(x); x]) + x
    Stitch-Net  3 -> 3   plain stack
    Wrap-Net    2 -> 3   plain stack
    Unwrap-Net  3 -> 2   plain stack
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import LEAKY_SLOPE, DualPoint2, Tape, Var
from .geometry import NormalizationTransform, PointCloud3, UvCloud

logger = logging.getLogger(__name__)

HIDDEN_DIMS = (64, 128, 512, 128)
EMBED_DIM = 64

CHECKPOINT_MAGIC = b"PPNT1"
HEADER_KEYS = ("hidden_dims", "embed_dim", "arrays")
CHECKPOINT_VERSION = 1

STACK_NAMES = (
    "deform_embed", "deform_offset",
    "cut_embed", "cut_offset",
    "stitch", "wrap", "unwrap",
)

Signal = Union[Var, DualPoint2]


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt or mismatched checkpoint files."""


def stack_dims(embed_dim: int = EMBED_DIM) -> Dict[str, Tuple[int, int]]:
    """(in_dim, out_dim) of every stack."""
    return {
        "deform_embed": (2, embed_dim),
        "deform_offset": (embed_dim + 2, 2),
        "cut_embed": (3, embed_dim),
        "cut_offset": (embed_dim + 3, 3),
        "stitch": (3, 3),
        "wrap": (2, 3),
        "unwrap": (3, 2),
    }


@dataclass
class MlpStack:
    """Point-wise MLP: weights[i] has shape (out_i, in_i)."""
    name: str
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    slope: float = LEAKY_SLOPE

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_dims(self) -> Tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights[:-1])

    @classmethod
    def build(
        cls,
        name: str,
        in_dim: int,
        out_dim: int,
        hidden_dims: Sequence[int],
        rng: np.random.Generator,
        zero_last: bool = False,
        slope: float = LEAKY_SLOPE,
    ) -> "MlpStack":
        """Fan-in scaled uniform initialization (He-uniform for LeakyReLU)."""
        dims = [in_dim, *hidden_dims, out_dim]
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            if last and zero_last:
                weights.append(np.zeros((fan_out, fan_in)))
                biases.append(np.zeros(fan_out))
                continue
            w_bound = np.sqrt(6.0 / ((1.0 + slope ** 2) * fan_in))
            b_bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-w_bound, w_bound, size=(fan_out, fan_in)))
            biases.append(rng.uniform(-b_bound, b_bound, size=fan_out))
        return cls(name=name, weights=weights, biases=biases, slope=slope)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass (inference path)."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.where(h >= 0.0, h, self.slope * h)
        return h

    def apply(self, tape: Tape, x: Signal) -> Signal:
        """Recorded forward pass; DualPoint2 inputs also carry their tangents."""
        last = len(self.weights) - 1
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w_var = tape.parameter(f"{self.name}.weight{i}", w)
            b_var = tape.parameter(f"{self.name}.bias{i}", b)
            if isinstance(h, DualPoint2):
                h = h.affine(w_var, b_var)
                if i < last:
                    h = h.leaky_relu(self.slope)
            else:
                h = tape.affine(h, w_var, b_var)
                if i < last:
                    h = tape.leaky_relu(h, self.slope)
        return h

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{self.name}.weight{i}"] = w
            params[f"{self.name}.bias{i}"] = b
        return params


@dataclass
class SubNetworkSet:
    """The five sub-networks, shared by both cycle branches."""
    deform_embed: MlpStack
    deform_offset: MlpStack
    cut_embed: MlpStack
    cut_offset: MlpStack
    stitch: MlpStack
    wrap: MlpStack
    unwrap: MlpStack
    seed: Optional[int] = None

    def stacks(self) -> List[MlpStack]:
        return [getattr(self, name) for name in STACK_NAMES]

    @property
    def hidden_dims(self) -> Tuple[int, ...]:
        return self.stitch.hidden_dims

    @property
    def embed_dim(self) -> int:
        return self.deform_embed.out_dim

    def parameters(self) -> Dict[str, np.ndarray]:
        """All parameters keyed '<stack>.weight<i>' / '<stack>.bias<i>', in a fixed order."""
        params = {}
        for stack in self.stacks():
            params.update(stack.parameters())
        return params

    def assign(self, params: Dict[str, np.ndarray]) -> None:
        """Replace parameter buffers by name."""
        for stack in self.stacks():
            for i in range(len(stack.weights)):
                w_key, b_key = f"{stack.name}.weight{i}", f"{stack.name}.bias{i}"
                if w_key in params:
                    stack.weights[i] = np.asarray(params[w_key], dtype=np.float64)
                if b_key in params:
                    stack.biases[i] = np.asarray(params[b_key], dtype=np.float64)

    def copy(self) -> "SubNetworkSet":
        stacks = {
            stack.name: MlpStack(
                name=stack.name,
                weights=[w.copy() for w in stack.weights],
                biases=[b.copy() for b in stack.biases],
                slope=stack.slope,
            )
            for stack in self.stacks()
        }
        return SubNetworkSet(**stacks, seed=self.seed)

    @classmethod
    def from_parameters(
        cls,
        params: Dict[str, np.ndarray],
        hidden_dims: Sequence[int],
        embed_dim: int,
        slope: float = LEAKY_SLOPE,
        seed: Optional[int] = None,
    ) -> "SubNetworkSet":
        """Rebuild a set from named buffers, validating every shape."""
        n_layers = len(hidden_dims) + 1
        stacks = {}
        for name, (in_dim, out_dim) in stack_dims(embed_dim).items():
            dims = [in_dim, *hidden_dims, out_dim]
            weights, biases = [], []
            for i in range(n_layers):
                w = params.get(f"{name}.weight{i}")
                b = params.get(f"{name}.bias{i}")
                if w is None or b is None:
                    raise CheckpointError(f"Missing parameters for {name} layer {i}")
                if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                    raise CheckpointError(
                        f"{name} layer {i}: shape {w.shape} does not match "
                        f"architecture {(dims[i + 1], dims[i])}"
                    )
                weights.append(np.asarray(w, dtype=np.float64))
                biases.append(np.asarray(b, dtype=np.float64))
            stacks[name] = MlpStack(name=name, weights=weights, biases=biases, slope=slope)
        return cls(**stacks, seed=seed)

    # ------------------------------------------------------------------
    # Recorded forwards (tape)
    # ------------------------------------------------------------------

    def _residual(self, tape: Tape, embed: MlpStack, offset: MlpStack, x: Signal) -> Signal:
        h = embed.apply(tape, x)
        if isinstance(x, DualPoint2):
            return offset.apply(tape, h.concat(x)).add(x)
        return offset.apply(tape, tape.concat(h, x)) + x

    def deform(self, tape: Tape, x: Signal) -> Signal:
        return self._residual(tape, self.deform_embed, self.deform_offset, x)

    def cut(self, tape: Tape, x: Signal) -> Signal:
        return self._residual(tape, self.cut_embed, self.cut_offset, x)

    def stitch_net(self, tape: Tape, x: Signal) -> Signal:
        return self.stitch.apply(tape, x)

    def wrap_net(self, tape: Tape, x: Signal) -> Signal:
        return self.wrap.apply(tape, x)

    def unwrap_net(self, tape: Tape, x: Signal) -> Signal:
        return self.unwrap.apply(tape, x)


# ============================================================================
# NUMPY FORWARDS
# ============================================================================

def _residual_eval(embed: MlpStack, offset: MlpStack, x: np.ndarray) -> np.ndarray:
    h = embed.evaluate(x)
    return offset.evaluate(np.concatenate([h, x], axis=1)) + x


def deform_forward(net: SubNetworkSet, x: UvCloud) -> UvCloud:
    """Deform-Net: offset([embed(x); x]) + x."""
    return UvCloud(_residual_eval(net.deform_embed, net.deform_offset, x.coords))


def cut_forward(net: SubNetworkSet, x: PointCloud3) -> PointCloud3:
    """Cut-Net: offset([embed(x); x]) + x."""
    return PointCloud3(_residual_eval(net.cut_embed, net.cut_offset, x.points))


def stitch_forward(net: SubNetworkSet, x: PointCloud3) -> PointCloud3:
    return PointCloud3(net.stitch.evaluate(x.points))


def wrap_forward(net: SubNetworkSet, x: UvCloud) -> PointCloud3:
    return PointCloud3(net.wrap.evaluate(x.coords))


def unwrap_forward(net: SubNetworkSet, x: PointCloud3) -> UvCloud:
    return UvCloud(net.unwrap.evaluate(x.points))


def init_params(
    seed: int,
    hidden_dims: Sequence[int] = HIDDEN_DIMS,
    embed_dim: int = EMBED_DIM,
    slope: float = LEAKY_SLOPE,
) -> SubNetworkSet:
    """
    Fresh parameters from a seeded generator.

    Offset heads start with a zero final layer, so Deform-Net and Cut-Net
    are exact identities at initialization.
    """
    rng = np.random.default_rng(seed)
    hidden_dims = tuple(int(h) for h in hidden_dims)
    stacks = {}
    for name, (in_dim, out_dim) in stack_dims(embed_dim).items():
        stacks[name] = MlpStack.build(
            name, in_dim, out_dim, hidden_dims, rng,
            zero_last=name.endswith("_offset"),
            slope=slope,
        )
    logger.debug(f"Initialized sub-networks (seed={seed}, hidden={hidden_dims}, d={embed_dim})")
    return SubNetworkSet(**stacks, seed=seed)


# ============================================================================
# CHECKPOINTS
# ============================================================================

@dataclass
class Checkpoint:
    """Contents of a checkpoint file."""
    net: SubNetworkSet
    transform: Optional[NormalizationTransform] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    extras: Dict[str, np.ndarray] = field(default_factory=dict)


def save_checkpoint(
    net: SubNetworkSet,
    path: Union[str, Path],
    transform: Optional[NormalizationTransform] = None,
    metadata: Optional[Dict[str, Any]] = None,
    extras: Optional[Dict[str, np.ndarray]] = None,
) -> Path:
    """
    Write a checkpoint.

    Layout: magic b'PPNT1' | uint32 LE header length | UTF-8 JSON header |
    little-endian float64 payload (arrays in header order).
    """
    path = Path(path)
    arrays: List[Tuple[str, np.ndarray]] = [
        (f"net/{name}", value) for name, value in net.parameters().items()
    ]
    arrays += [(f"extra/{name}", np.asarray(value)) for name, value in (extras or {}).items()]

    header = {
        "version": CHECKPOINT_VERSION,
        "hidden_dims": list(net.hidden_dims),
        "embed_dim": net.embed_dim,
        "leaky_slope": net.stitch.slope,
        "seed": net.seed,
        "normalization": transform.to_dict() if transform else None,
        "metadata": metadata or {},
        "arrays": [{"name": name, "shape": list(value.shape)} for name, value in arrays],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for _, value in arrays:
            f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return path


def load_checkpoint(
    path: Union[str, Path],
    expected_hidden: Optional[Sequence[int]] = None,
) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Args:
        path: Checkpoint file
        expected_hidden: If given, the stored hidden dims must match

    Raises:
        CheckpointError: bad magic, unsupported version, corrupt payload,
            or architecture mismatch
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    magic_len = len(CHECKPOINT_MAGIC)
    if raw[:magic_len] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic {raw[:magic_len]!r})")
    if len(raw) < magic_len + 4:
        raise CheckpointError(f"{path}: truncated header")
    (header_len,) = struct.unpack("<I", raw[magic_len:magic_len + 4])
    start = magic_len + 4
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e

    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not a JSON object")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}"
        )
    missing = [key for key in HEADER_KEYS if key not in header]
    if missing:
        raise CheckpointError(f"{path}: header lacks {', '.join(missing)}")
    try:
        hidden = tuple(int(h) for h in header["hidden_dims"])
        embed_dim = int(header["embed_dim"])
        entries = [(str(a["name"]), tuple(int(s) for s in a["shape"])) for a in header["arrays"]]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed header field: {e!r}") from e
    if expected_hidden is not None and hidden != tuple(expected_hidden):
        raise CheckpointError(
            f"{path}: hidden dims {list(hidden)} do not match expected {list(expected_hidden)}"
        )

    payload = raw[start + header_len:]
    expected_size = 8 * sum(int(np.prod(shape)) for _, shape in entries)
    if len(payload) != expected_size:
        raise CheckpointError(
            f"{path}: payload has {len(payload)} bytes, header describes {expected_size}"
        )

    params: Dict[str, np.ndarray] = {}
    extras: Dict[str, np.ndarray] = {}
    offset = 0
    for entry_name, shape in entries:
        count = int(np.prod(shape))
        value = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
        kind, _, name = entry_name.partition("/")
        (params if kind == "net" else extras)[name] = value

    net = SubNetworkSet.from_parameters(
        params,
        hidden_dims=hidden,
        embed_dim=embed_dim,
        slope=float(header.get("leaky_slope", LEAKY_SLOPE)),
        seed=header.get("seed"),
    )
    normalization = header.get("normalization")
    try:
        transform = NormalizationTransform.from_dict(normalization) if normalization else None
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: malformed normalization: {e!r}") from e
    return Checkpoint(
        net=net,
        transform=transform,
        metadata=header.get("metadata", {}),
        extras=extras,
    )

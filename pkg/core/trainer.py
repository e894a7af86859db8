"""
Trainer Module - Optimization loop for the cycle mapping.

Schedule (global step indices):
1. Warm-up: fit the convex hull of the input (first warmup_fraction of steps)
2. Sparse phase: a farthest-point subset of the input
3. Dense phase: every input point (from dense_switch onwards)

Every step perturbs the 3D inputs with Gaussian noise, records both branches,
backpropagates the weighted objective and applies one Adam update. Random
draws come from a generator seeded with (seed, step), so a run resumed from a
checkpoint replays the uninterrupted run exactly.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import DEGENERACY_FLOOR, LEAKY_SLOPE
from .geometry import (
    L_FLOOR,
    GeometryError,
    NormalizationTransform,
    PointCloud3,
    convex_hull_3d,
    farthest_point_sampling,
    sample_mesh_surface,
    unit_sphere_cloud,
)
from .losses import DISTORTION_MODES, LossReport, LossSettings, LossWeights, total_loss
from .networks import (
    EMBED_DIM,
    HIDDEN_DIMS,
    SubNetworkSet,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .pipeline import BRANCHES, PipelineError, make_grid, run_pipeline

logger = logging.getLogger(__name__)

SAMPLING_MODES = ("fps", "random")


class ConfigError(ValueError):
    """Raised for malformed or out-of-range configuration."""


class TrainingDivergedError(RuntimeError):
    """Raised when a step produces a non-finite objective."""

    def __init__(self, step: int, last_checkpoint: Optional[Path], reason: str = "non-finite loss"):
        where = f"; last good checkpoint: {last_checkpoint}" if last_checkpoint else ""
        super().__init__(f"Training diverged at step {step} ({reason}){where}")
        self.step = step
        self.last_checkpoint = last_checkpoint


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class TrainConfig:
    """Every hyperparameter of a run. Defaults reproduce the standard setting."""
    # Loss weights
    w_unwrap: float = 0.01
    w_wrap: float = 1.0
    w_cycle: float = 0.01
    w_distortion: float = 0.01
    w_aflip: float = 0.01

    # Thresholds and neighborhoods
    distortion_mode: str = "conformal"
    k_unwrap: int = 8
    k_cut: int = 3
    k_aflip: int = 4
    t_angle: float = math.pi / 2
    cut_ratio: float = 0.01
    eps_factor: float = 0.1
    degeneracy_floor: float = DEGENERACY_FLOOR
    l_floor: float = L_FLOOR

    # Schedule
    total_steps: int = 3000
    warmup_fraction: float = 0.1
    sparse_fraction: float = 0.25
    dense_switch: float = 0.6
    sparse_sampling: str = "fps"
    perturbation: float = 0.005
    jacobian_points: int = 4096
    grid_size: Optional[int] = None

    # Optimizer
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_milestones: Tuple[float, ...] = (0.5, 0.75)
    decay_factor: float = 0.5
    grad_clip: float = 10.0

    # Network
    hidden_dims: Tuple[int, ...] = HIDDEN_DIMS
    embed_dim: int = EMBED_DIM
    leaky_slope: float = LEAKY_SLOPE

    # Run
    seed: int = 0
    branches: str = "both"
    normalize_losses: bool = True
    log_every: int = 10
    checkpoint_every: int = 500

    @classmethod
    def from_config(cls, config: Dict[str, Any], **overrides: Any) -> "TrainConfig":
        """
        Build from a sectioned config mapping; keyword overrides win.

        Missing keys fall back to the defaults above.
        """
        d = cls()
        network = config.get("network", {}) or {}
        weights = config.get("weights", {}) or {}
        thresholds = config.get("thresholds", {}) or {}
        schedule = config.get("schedule", {}) or {}
        optimizer = config.get("optimizer", {}) or {}
        training = config.get("training", {}) or {}

        values = dict(
            w_unwrap=weights.get("unwrap", d.w_unwrap),
            w_wrap=weights.get("wrap", d.w_wrap),
            w_cycle=weights.get("cycle", d.w_cycle),
            w_distortion=weights.get("distortion", d.w_distortion),
            w_aflip=weights.get("aflip", d.w_aflip),
            distortion_mode=training.get("distortion_mode", d.distortion_mode),
            k_unwrap=thresholds.get("k_unwrap", d.k_unwrap),
            k_cut=thresholds.get("k_cut", d.k_cut),
            k_aflip=thresholds.get("k_aflip", d.k_aflip),
            t_angle=thresholds.get("t_angle", d.t_angle),
            cut_ratio=thresholds.get("cut_ratio", d.cut_ratio),
            eps_factor=thresholds.get("eps_factor", d.eps_factor),
            degeneracy_floor=thresholds.get("degeneracy_floor", d.degeneracy_floor),
            l_floor=thresholds.get("l_floor", d.l_floor),
            total_steps=schedule.get("total_steps", d.total_steps),
            warmup_fraction=schedule.get("warmup_fraction", d.warmup_fraction),
            sparse_fraction=schedule.get("sparse_fraction", d.sparse_fraction),
            dense_switch=schedule.get("dense_switch", d.dense_switch),
            sparse_sampling=schedule.get("sparse_sampling", d.sparse_sampling),
            perturbation=schedule.get("perturbation", d.perturbation),
            jacobian_points=schedule.get("jacobian_points", d.jacobian_points),
            grid_size=schedule.get("grid_size", d.grid_size),
            learning_rate=optimizer.get("learning_rate", d.learning_rate),
            beta1=optimizer.get("beta1", d.beta1),
            beta2=optimizer.get("beta2", d.beta2),
            adam_eps=optimizer.get("eps", d.adam_eps),
            decay_milestones=optimizer.get("decay_milestones", d.decay_milestones),
            decay_factor=optimizer.get("decay_factor", d.decay_factor),
            grad_clip=optimizer.get("grad_clip", d.grad_clip),
            hidden_dims=network.get("hidden_dims", d.hidden_dims),
            embed_dim=network.get("embed_dim", d.embed_dim),
            leaky_slope=network.get("leaky_slope", d.leaky_slope),
            seed=training.get("seed", d.seed),
            branches=training.get("branches", d.branches),
            normalize_losses=training.get("normalize_losses", d.normalize_losses),
            log_every=training.get("log_every", d.log_every),
            checkpoint_every=training.get("checkpoint_every", d.checkpoint_every),
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        try:
            cfg = cls(**values)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        cfg._coerce()
        cfg.validate()
        return cfg

    _INT_FIELDS = ("k_unwrap", "k_cut", "k_aflip", "total_steps", "jacobian_points",
                   "embed_dim", "seed", "log_every", "checkpoint_every")
    _FLOAT_FIELDS = ("w_unwrap", "w_wrap", "w_cycle", "w_distortion", "w_aflip",
                     "t_angle", "cut_ratio", "eps_factor", "degeneracy_floor", "l_floor",
                     "warmup_fraction", "sparse_fraction", "dense_switch", "perturbation",
                     "learning_rate", "beta1", "beta2", "adam_eps", "decay_factor", "grad_clip",
                     "leaky_slope")

    def _coerce(self) -> None:
        # PyYAML reads exponent floats without a dot (1e-3) as strings
        name = "hidden_dims"
        try:
            self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
            name = "decay_milestones"
            self.decay_milestones = tuple(float(m) for m in self.decay_milestones)
            for name in self._INT_FIELDS:
                setattr(self, name, int(getattr(self, name)))
            for name in self._FLOAT_FIELDS:
                setattr(self, name, float(getattr(self, name)))
            name = "grid_size"
            if self.grid_size is not None:
                self.grid_size = int(self.grid_size)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Malformed numeric setting '{name}': {e}") from e

    def validate(self) -> None:
        """Raise ConfigError on any out-of-range setting."""
        for name in ("w_unwrap", "w_wrap", "w_cycle", "w_distortion", "w_aflip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.distortion_mode not in DISTORTION_MODES:
            raise ConfigError(f"distortion_mode must be one of {DISTORTION_MODES}, got '{self.distortion_mode}'")
        if self.branches not in BRANCHES:
            raise ConfigError(f"branches must be one of {BRANCHES}, got '{self.branches}'")
        if self.sparse_sampling not in SAMPLING_MODES:
            raise ConfigError(f"sparse_sampling must be one of {SAMPLING_MODES}, got '{self.sparse_sampling}'")
        for name in ("warmup_fraction", "sparse_fraction", "dense_switch"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.warmup_fraction > self.dense_switch:
            raise ConfigError("warmup_fraction cannot exceed dense_switch")
        if any(not 0.0 <= m <= 1.0 for m in self.decay_milestones):
            raise ConfigError(f"decay_milestones must lie in [0, 1], got {self.decay_milestones}")
        for name in ("k_unwrap", "k_cut", "k_aflip", "log_every", "checkpoint_every", "jacobian_points", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        for name in ("t_angle", "cut_ratio", "eps_factor", "learning_rate", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.total_steps < 0 or self.perturbation < 0:
            raise ConfigError("total_steps and perturbation must be non-negative")
        if self.grid_size is not None and self.grid_size < 4:
            raise ConfigError(f"grid_size must be at least 4, got {self.grid_size}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["hidden_dims"] = list(self.hidden_dims)
        data["decay_milestones"] = list(self.decay_milestones)
        return data

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            unwrap=self.w_unwrap, wrap=self.w_wrap, cycle=self.w_cycle,
            distortion=self.w_distortion, aflip=self.w_aflip,
        )

    def loss_settings(self) -> LossSettings:
        return LossSettings(
            k_unwrap=self.k_unwrap,
            eps_factor=self.eps_factor,
            l_floor=self.l_floor,
            distortion_mode=self.distortion_mode,
            k_aflip=self.k_aflip,
            t_angle=self.t_angle,
            normalize=self.normalize_losses,
        )

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))

    @property
    def dense_step(self) -> int:
        return int(round(self.dense_switch * self.total_steps))

    def phase(self, step: int) -> str:
        if step < self.warmup_steps:
            return "warmup"
        if step < self.dense_step:
            return "sparse"
        return "dense"

    def subset_size(self, n: int) -> int:
        """Sparse subset size, large enough for every neighborhood query."""
        floor = max(self.k_unwrap, self.k_aflip, self.k_cut) + 2
        return min(n, max(floor, int(round(self.sparse_fraction * n))))


# ============================================================================
# OPTIMIZER
# ============================================================================

class AdamOptimizer:
    """
    Adaptive-moment gradient descent with bias correction.

    The learning rate is multiplied by decay_factor at every milestone step
    already passed. Gradients are clipped to a global L2 norm before the
    moment updates.
    """

    def __init__(
        self,
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        grad_clip: Optional[float] = 10.0,
        milestones: Sequence[int] = (),
        decay_factor: float = 0.5,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.grad_clip = grad_clip
        self.milestones = tuple(sorted(int(m) for m in milestones))
        self.decay_factor = decay_factor
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def learning_rate_at(self, step: int) -> float:
        passed = sum(1 for m in self.milestones if step >= m)
        return self.learning_rate * self.decay_factor ** passed

    def clip(self, grads: Dict[str, np.ndarray]) -> Tuple[Dict[str, np.ndarray], float, bool]:
        """Scale gradients so their global norm does not exceed grad_clip."""
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if self.grad_clip is None or norm <= self.grad_clip:
            return grads, norm, False
        factor = self.grad_clip / norm
        return {name: g * factor for name, g in grads.items()}, norm, True

    def step(
        self,
        params: Dict[str, np.ndarray],
        grads: Dict[str, np.ndarray],
        step: int,
    ) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
        """
        One update.

        Returns:
            (updated parameter map, info with lr, grad_norm, clipped)
        """
        grads, norm, clipped = self.clip(grads)
        self.t += 1
        lr = self.learning_rate_at(step)
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t

        updated = {}
        for name, value in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(value)
            m = self.beta1 * self.m.get(name, np.zeros_like(value)) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, np.zeros_like(value)) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / bias1
            v_hat = v / bias2
            updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated, {"lr": lr, "grad_norm": norm, "clipped": clipped}

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"adam.t": np.array([float(self.t)])}
        for name in self.m:
            state[f"adam.m.{name}"] = self.m[name]
            state[f"adam.v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.t = int(state.get("adam.t", np.zeros(1))[0])
        self.m = {k[len("adam.m."):]: v.copy() for k, v in state.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: v.copy() for k, v in state.items() if k.startswith("adam.v.")}


# ============================================================================
# TRAINING LOG
# ============================================================================

@dataclass
class TrainLog:
    """LossReport stream, phase markers and checkpoint paths of one run."""
    reports: List[Tuple[int, LossReport]] = field(default_factory=list)
    markers: List[Dict[str, Any]] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    path: Optional[Path] = None

    def _write(self, record: Dict[str, Any]) -> None:
        if self.path is None:
            return
        with open(self.path, "a") as f:
            f.write(json.dumps(record) + "\n")

    def add_report(self, step: int, phase: str, report: LossReport, lr: float, write: bool) -> None:
        self.reports.append((step, report))
        if write:
            record = {"step": step, "phase": phase}
            record.update(report.to_dict())
            record["lr"] = lr
            record["wall_time"] = time.time()
            self._write(record)

    def add_marker(self, marker: str, step: int) -> None:
        record = {"marker": marker, "step": step}
        self.markers.append(record)
        self._write(record)
        logger.info(f"Phase marker '{marker}' at step {step}")

    def totals(self) -> np.ndarray:
        return np.array([r.total for _, r in self.reports])


# ============================================================================
# TRAINER
# ============================================================================

class CycleTrainer:
    """
    Runs the optimization of a SubNetworkSet on one normalized point cloud.

    Usage:
        trainer = CycleTrainer(config, run_dir=Path("runs/sphere"))
        net, log = trainer.fit(points)
    """

    def __init__(
        self,
        config: TrainConfig,
        net: Optional[SubNetworkSet] = None,
        run_dir: Optional[Path] = None,
        transform: Optional[NormalizationTransform] = None,
    ):
        self.config = config
        self.net = net if net is not None else init_params(
            config.seed, config.hidden_dims, config.embed_dim, config.leaky_slope
        )
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.transform = transform
        self.weights = config.loss_weights()
        self.settings = config.loss_settings()
        self.optimizer = AdamOptimizer(
            learning_rate=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.adam_eps,
            grad_clip=config.grad_clip,
            milestones=[int(round(m * config.total_steps)) for m in config.decay_milestones],
            decay_factor=config.decay_factor,
        )
        self.log = TrainLog(path=self.run_dir / "log.jsonl" if self.run_dir else None)
        self.last_checkpoint: Optional[Path] = None
        self.step = 0
        self._last_lr = config.learning_rate
        self._grids: Dict[int, np.ndarray] = {}

    # ------------------------------------------------------------------
    # Inputs per phase
    # ------------------------------------------------------------------

    def _grid(self, n: int) -> np.ndarray:
        size = self.config.grid_size or n
        if size not in self._grids:
            self._grids[size] = make_grid(size).coords
        return self._grids[size]

    def warmup_target(self, points: np.ndarray) -> np.ndarray:
        """
        Points sampled from the convex hull, as many as the sparse subset.

        Falls back to the unit sphere when the hull cannot be built.
        """
        m = self.config.subset_size(len(points))
        try:
            hull = convex_hull_3d(points)
            return sample_mesh_surface(hull, m, self.config.seed).points
        except GeometryError as e:
            logger.warning(f"Convex hull warm-up target unavailable ({e}); using the unit sphere")
            return unit_sphere_cloud(m, self.config.seed).points

    def sparse_subset(self, points: np.ndarray) -> np.ndarray:
        m = self.config.subset_size(len(points))
        if self.config.sparse_sampling == "fps":
            index = farthest_point_sampling(points, m, self.config.seed)
        else:
            rng = np.random.default_rng(self.config.seed)
            index = np.sort(rng.choice(len(points), size=m, replace=False))
        return points[index]

    # ------------------------------------------------------------------
    # Steps
    # ------------------------------------------------------------------

    def train_step(self, points: np.ndarray, grid: np.ndarray, step: int) -> Tuple[SubNetworkSet, LossReport]:
        """
        One perturbed forward, backward and Adam update.

        Raises:
            TrainingDivergedError: non-finite intermediate or objective
        """
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, step])
        if cfg.perturbation > 0.0:
            points = points + rng.normal(0.0, cfg.perturbation, size=points.shape)

        try:
            state = run_pipeline(
                self.net, points, grid,
                branches=cfg.branches,
                jacobian_points=cfg.jacobian_points,
                rng=rng,
                floor=cfg.degeneracy_floor,
            )
        except PipelineError as e:
            raise TrainingDivergedError(step, self.last_checkpoint, str(e)) from e

        objective, report = total_loss(state, self.weights, self.settings)
        if not math.isfinite(float(objective)):
            raise TrainingDivergedError(step, self.last_checkpoint)

        grads = state.tape.backward(objective)
        params = self.net.parameters()
        updated, info = self.optimizer.step(params, grads, step)
        for name, value in updated.items():
            if not np.all(np.isfinite(value)):
                raise TrainingDivergedError(step, self.last_checkpoint, f"non-finite update of {name}")
        self.net.assign(updated)
        self._last_lr = info["lr"]
        return self.net, report

    def _run_steps(self, start: int, stop: int, phase_points: Dict[str, np.ndarray]) -> None:
        cfg = self.config
        for step in range(start, stop):
            if step == cfg.warmup_steps and step > 0:
                self.log.add_marker("warmup_end", step)
            if step == cfg.dense_step and step > 0:
                self.log.add_marker("dense_switch", step)

            phase = cfg.phase(step)
            points = phase_points[phase]
            _, report = self.train_step(points, self._grid(len(points)), step)
            self.step = step + 1

            last = step == cfg.total_steps - 1
            write = step % cfg.log_every == 0 or last
            self.log.add_report(step, phase, report, self._last_lr, write)
            if write:
                logger.info(
                    f"step {step:5d} [{phase}] total={report.total:.6f} wrap={report.wrap:.6f} "
                    f"cycle={report.cycle:.6f} dist={report.distortion:.6f} aflip={report.aflip:.6f}"
                )
            if self.run_dir is not None and self.step % cfg.checkpoint_every == 0 and not last:
                self.save(self.run_dir / f"ckpt_{self.step}")

    def warmup(self, points: np.ndarray) -> SubNetworkSet:
        """Run the warm-up steps on the convex hull of points."""
        cfg = self.config
        if cfg.warmup_steps == 0:
            return self.net
        target = self.warmup_target(np.asarray(points, dtype=np.float64))
        self._run_steps(self.step, cfg.warmup_steps, {"warmup": target})
        return self.net

    def fit(
        self,
        points: PointCloud3,
        resume: Optional[Path] = None,
    ) -> Tuple[SubNetworkSet, TrainLog]:
        """
        Full schedule: warm-up, sparse phase, dense phase.

        Args:
            points: Normalized input cloud
            resume: Checkpoint to continue from (same config and seed)

        Returns:
            (trained network, TrainLog)
        """
        cfg = self.config
        coords = points.points if isinstance(points, PointCloud3) else np.asarray(points, dtype=np.float64)
        if len(coords) <= max(cfg.k_unwrap, cfg.k_aflip, cfg.k_cut):
            raise ConfigError(
                f"{len(coords)} points are too few for neighborhoods of size "
                f"{max(cfg.k_unwrap, cfg.k_aflip, cfg.k_cut)}"
            )
        if resume is not None:
            self.restore(resume)

        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)

        logger.info(
            f"Training on {len(coords)} points: {cfg.total_steps} steps "
            f"(warm-up {cfg.warmup_steps}, dense from {cfg.dense_step}), branches={cfg.branches}"
        )
        phase_points: Dict[str, np.ndarray] = {"dense": coords}
        if self.step < cfg.warmup_steps:
            phase_points["warmup"] = self.warmup_target(coords)
        if self.step < cfg.dense_step:
            phase_points["sparse"] = self.sparse_subset(coords)

        self._run_steps(self.step, cfg.total_steps, phase_points)

        if self.run_dir is not None:
            self.save(self.run_dir / "final.ckpt")
        return self.net, self.log

    # ------------------------------------------------------------------
    # Checkpoints
    # ------------------------------------------------------------------

    def save(self, path: Path) -> Path:
        path = save_checkpoint(
            self.net, path,
            transform=self.transform,
            metadata={"step": self.step, "config": self.config.to_dict()},
            extras=self.optimizer.state_dict(),
        )
        self.last_checkpoint = path
        self.log.checkpoints.append(path)
        logger.debug(f"Saved checkpoint {path}")
        return path

    def restore(self, path: Path) -> None:
        checkpoint = load_checkpoint(path, expected_hidden=self.config.hidden_dims)
        self.net = checkpoint.net
        self.optimizer.load_state_dict(checkpoint.extras)
        self.step = int(checkpoint.metadata.get("step", 0))
        if checkpoint.transform is not None:
            self.transform = checkpoint.transform
        self.last_checkpoint = Path(path)
        logger.info(f"Resumed from {path} at step {self.step}")


def train_step(
    net: SubNetworkSet,
    P_subset: np.ndarray,
    G: np.ndarray,
    config: TrainConfig,
    optimizer: Optional[AdamOptimizer] = None,
    step: int = 0,
) -> Tuple[SubNetworkSet, LossReport]:
    """Single step on an explicit subset and grid (functional entry point)."""
    trainer = CycleTrainer(config, net=net)
    if optimizer is not None:
        trainer.optimizer = optimizer
    return trainer.train_step(np.asarray(P_subset, dtype=np.float64), np.asarray(G, dtype=np.float64), step)


def fit(net: SubNetworkSet, P: PointCloud3, config: TrainConfig, run_dir: Optional[Path] = None) -> Tuple[SubNetworkSet, TrainLog]:
    """Run the full schedule from an initial network."""
    return CycleTrainer(config, net=net, run_dir=run_dir).fit(P)

#!/usr/bin/env python3
"""
CycleUV - Neural UV parameterization of unstructured point clouds.

Learns a global free-boundary UV map of a 3D point cloud with five point-wise
sub-networks trained through bi-directional cycle mapping, then extracts
cutting seams, distortion metrics and exportable UV artifacts.

Usage:
    python main.py parameterize sphere.obj --points 1024 --steps 3000 --seed 7
    python main.py evaluate runs/sphere/final.ckpt sphere.obj --out metrics.json
    python main.py ablate builtin:sphere --out runs/ablation --jobs 3
    python main.py export runs/sphere/final.ckpt sphere.obj --out runs/sphere/dense

Exit codes:
    0  success
    2  unreadable or malformed input
    3  malformed config, bad checkpoint or architecture mismatch
    4  training aborted on non-finite values
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from data.loader import (
    InputFormatError,
    InputLoader,
    LoadedInput,
    RunManifest,
    load_config,
    save_config_snapshot,
)
from core.analysis import MetricReport, evaluate_run, surface_normals
from core.geometry import GeometryError, NormalizationTransform, PointCloud3, TriangleMesh, normalize_cloud
from core.networks import CheckpointError, SubNetworkSet, load_checkpoint
from core.trainer import ConfigError, CycleTrainer, TrainConfig, TrainingDivergedError
from output.exporters import (
    export_uv_obj,
    export_uv_svg,
    normals_to_colors,
    write_ablation_csv,
    write_json,
    write_metrics_json,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONFIG = 3
EXIT_DIVERGED = 4

LOG_LEVEL_ENV = "CYCLEUV_LOG_LEVEL"

# Configure logging
logging.basicConfig(
    level=getattr(logging, os.environ.get(LOG_LEVEL_ENV, "INFO").upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

ABLATION_VARIANTS = [
    (branches, mode)
    for branches in ("both", "3d-only", "2d-only")
    for mode in ("conformal", "isometric")
]


class CycleUV:
    """
    Main orchestrator for one parameterization run.

    Pipeline:
    1. Load the input shape (mesh surface samples or cloud)
    2. Normalize into the unit bounding sphere
    3. Train the sub-networks (warm-up, sparse, dense)
    4. Analyze: seams, inferred UVs, metrics
    5. Export artifacts into the run directory
    """

    def __init__(self, config: Dict[str, Any], out_dir: Path, overrides: Optional[Dict[str, Any]] = None,
                 points: Optional[int] = None):
        self.config = config
        self.overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        self.train_config = TrainConfig.from_config(config, **self.overrides)
        self.out_dir = Path(out_dir)
        self.points = points
        self.loader = InputLoader(config, points=points, seed=self.train_config.seed)

        # State
        self.loaded: Optional[LoadedInput] = None
        self.cloud: Optional[PointCloud3] = None
        self.transform: Optional[NormalizationTransform] = None
        self.net: Optional[SubNetworkSet] = None
        self.trainer: Optional[CycleTrainer] = None
        self.report: Optional[MetricReport] = None
        self.uv = None
        self.seams = None

    def load_input(self, input_path: str):
        """Step 1: Load the input shape."""
        logger.info("=" * 60)
        logger.info("STEP 1: Loading input")
        logger.info("=" * 60)

        self.loaded = self.loader.load(input_path)
        print(f"\nInput: {input_path} ({self.loaded.format})")
        print(f"  Training points: {len(self.loaded.cloud)}")
        if self.loaded.mesh is not None:
            print(f"  Evaluation mesh: {len(self.loaded.mesh.vertices)} vertices, "
                  f"{len(self.loaded.mesh.faces)} triangles")

    def normalize(self):
        """Step 2: Normalize into the unit bounding sphere."""
        logger.info("=" * 60)
        logger.info("STEP 2: Normalizing")
        logger.info("=" * 60)

        self.cloud, self.transform = normalize_cloud(self.loaded.cloud)
        print(f"\nCenter: {np.round(self.transform.center, 6).tolist()}  scale: {self.transform.scale:.6f}")

    def train(self, resume: Optional[Path] = None):
        """Step 3: Optimize the cycle mapping."""
        logger.info("=" * 60)
        logger.info("STEP 3: Training")
        logger.info("=" * 60)

        cfg = self.train_config
        self.trainer = CycleTrainer(cfg, run_dir=self.out_dir, transform=self.transform)
        self.net, log = self.trainer.fit(self.cloud, resume=resume)

        if log.reports:
            _, last = log.reports[-1]
            print(f"\nFinal losses (step {cfg.total_steps - 1}):")
            for name in ("unwrap", "wrap", "cycle", "distortion", "aflip", "total"):
                print(f"  {name:11} {getattr(last, name):.6f}")

    def analyze(self):
        """Step 4: Seams, dense inference and metrics."""
        logger.info("=" * 60)
        logger.info("STEP 4: Analyzing the learned mapping")
        logger.info("=" * 60)

        cfg = self.train_config
        mesh = self._normalized_mesh()
        self.report, self.uv, self.seams = evaluate_run(
            self.net, self.cloud, mesh,
            k_cut=cfg.k_cut, cut_ratio=cfg.cut_ratio,
            eps_factor=cfg.eps_factor, l_floor=cfg.l_floor, seed=cfg.seed,
        )
        print_metrics(self.report)

    def export(self):
        """Step 5: Write artifacts."""
        logger.info("=" * 60)
        logger.info("STEP 5: Exporting artifacts")
        logger.info("=" * 60)

        mesh = self.loaded.mesh
        target = mesh if mesh is not None else PointCloud3(self.transform.invert(self.cloud.points))
        export_artifacts(self.net, target, self.uv, self.seams, self.out_dir)
        write_metrics_json(self.report, self.out_dir / "metrics.json")
        print(f"\nArtifacts written to: {self.out_dir}")

    def _normalized_mesh(self) -> Optional[TriangleMesh]:
        mesh = self.loaded.mesh
        if mesh is None:
            return None
        return TriangleMesh(self.transform.apply(mesh.vertices), mesh.faces)

    def write_manifest(self, command: str, input_path: str):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        snapshot = dict(self.config)
        snapshot["resolved"] = self.train_config.to_dict()
        save_config_snapshot(snapshot, self.out_dir / "config.snapshot")
        RunManifest(
            command=command,
            input_path=input_path,
            input_format=self.loaded.format if self.loaded else Path(input_path).suffix.lstrip("."),
            output_dir=str(self.out_dir),
            seed=self.train_config.seed,
            config=self.train_config.to_dict(),
            overrides=self.overrides,
            points=self.loader.points,
        ).save(self.out_dir / "manifest.json")

    def run(self, input_path: str, resume: Optional[Path] = None) -> Dict[str, Any]:
        """
        Run the full parameterization pipeline.

        Returns:
            Dictionary with the final loss report and metrics
        """
        print("\n" + "=" * 60)
        print("CYCLEUV - NEURAL POINT CLOUD PARAMETERIZATION")
        print("=" * 60)

        self.load_input(input_path)
        self.write_manifest("parameterize", input_path)
        self.normalize()
        self.train(resume=resume)
        self.analyze()
        self.export()

        last = self.trainer.log.reports[-1][1] if self.trainer.log.reports else None
        return {
            "losses": last.to_dict() if last else {},
            "metrics": self.report.to_dict(),
        }


def print_metrics(report: MetricReport):
    print(f"\nMetrics ({report.num_points} points):")
    label = "mesh angles" if report.conformality_source == "mesh" else "Jacobian proxy"
    print(f"  Conformality ({label}): {report.conformality:.4f}")
    if report.flip_fraction is not None:
        print(f"  Flipped triangles: {report.flip_fraction:.2%}")
    print(f"  UV overlap: {report.overlap_fraction:.2%} (eps={report.overlap_eps:.5f})")
    print(f"  Chamfer reconstruction: {report.chamfer:.6f}")
    print(f"  Isometric residual: {report.isometric_residual:.4f}")
    print(f"  Seams: {report.seam_count} points ({report.seam_fraction:.2%})")


def export_artifacts(net: SubNetworkSet, target, uv, seams, out_dir: Path):
    """uv.obj, uv.svg (colored by learned normals) and seams.json."""
    out_dir = Path(out_dir)
    export_uv_obj(target, uv, out_dir / "uv.obj")
    normals, _ = surface_normals(net, uv)
    export_uv_svg(uv, normals_to_colors(normals), out_dir / "uv.svg", seams=seams.indices)
    write_json(seams.to_dict(), out_dir / "seams.json")


# ============================================================================
# COMMANDS
# ============================================================================

def _overrides(args) -> Dict[str, Any]:
    return {
        "total_steps": getattr(args, "steps", None),
        "seed": getattr(args, "seed", None),
        "distortion_mode": getattr(args, "distortion", None),
        "branches": getattr(args, "branches", None),
        "w_distortion": getattr(args, "w_distortion", None),
    }


def cmd_parameterize(args) -> int:
    config = load_config(args.config)
    app = CycleUV(config, Path(args.out), _overrides(args), points=args.points)
    app.run(args.input, resume=Path(args.resume) if args.resume else None)
    return EXIT_OK


def _load_for_checkpoint(checkpoint_path: str, input_path: str, config: Dict[str, Any],
                         points: Optional[int]) -> Tuple[SubNetworkSet, LoadedInput, NormalizationTransform, TrainConfig]:
    checkpoint = load_checkpoint(checkpoint_path)
    stored = checkpoint.metadata.get("config", {})
    train_config = TrainConfig.from_config(config, **{k: v for k, v in stored.items()
                                                      if k in TrainConfig.__dataclass_fields__})
    # Clouds are inferred in full; meshes are still sampled to `points` when asked
    loaded = InputLoader(config, points=points, seed=train_config.seed, subsample=False).load(input_path)
    transform = checkpoint.transform
    if transform is None:
        logger.warning("Checkpoint has no normalization transform; normalizing the input afresh")
        _, transform = normalize_cloud(loaded.cloud)
    return checkpoint.net, loaded, transform, train_config


def cmd_evaluate(args) -> int:
    config = load_config(args.config)
    net, loaded, transform, cfg = _load_for_checkpoint(args.checkpoint, args.input, config, args.points)
    mesh = None
    if loaded.mesh is not None:
        mesh = TriangleMesh(transform.apply(loaded.mesh.vertices), loaded.mesh.faces)
    cloud = PointCloud3(transform.apply(loaded.cloud.points))
    report, _, _ = evaluate_run(
        net, cloud, mesh,
        k_cut=cfg.k_cut, cut_ratio=cfg.cut_ratio,
        eps_factor=cfg.eps_factor, l_floor=cfg.l_floor, seed=cfg.seed,
    )
    print_metrics(report)
    out = Path(args.out)
    if out.suffix != ".json":
        out = out / "metrics.json"
    write_metrics_json(report, out)
    print(f"\nMetrics saved to: {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    config = load_config(args.config)
    net, loaded, transform, cfg = _load_for_checkpoint(args.checkpoint, args.input, config, args.points)
    if loaded.mesh is not None and args.points is None:
        target = loaded.mesh
    else:
        target = loaded.cloud
    vertices = target.vertices if isinstance(target, TriangleMesh) else target.points
    normalized = transform.apply(vertices)
    report, uv, seams = evaluate_run(
        net, PointCloud3(normalized),
        TriangleMesh(normalized, target.faces) if isinstance(target, TriangleMesh) else None,
        k_cut=cfg.k_cut, cut_ratio=cfg.cut_ratio,
        eps_factor=cfg.eps_factor, l_floor=cfg.l_floor, seed=cfg.seed,
    )
    export_artifacts(net, target, uv, seams, Path(args.out))
    print(f"\nExported {len(uv)} UVs to: {args.out}")
    return EXIT_OK


def _run_variant(job: Tuple[str, Dict[str, Any], str, Optional[int], str, Dict[str, Any]]) -> Dict[str, Any]:
    """One ablation variant in its own subdirectory (top-level for process pools)."""
    input_path, config, out_dir, points, name, overrides = job
    app = CycleUV(config, Path(out_dir) / name, overrides, points=points)
    results = app.run(input_path)
    row = {"variant": name, "branches": overrides["branches"],
           "distortion_mode": overrides["distortion_mode"], "seed": app.train_config.seed}
    row.update({k: results["losses"].get(k) for k in ("unwrap", "wrap", "cycle", "distortion", "aflip", "total")})
    row.update(results["metrics"])
    return row


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    base = _overrides(args)
    # Validate once before spawning variants
    TrainConfig.from_config(config, **{k: v for k, v in base.items() if v is not None})

    jobs = []
    for branches, mode in ABLATION_VARIANTS:
        overrides = dict(base, branches=branches, distortion_mode=mode)
        jobs.append((args.input, config, args.out, args.points, f"{branches}_{mode}", overrides))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_variant, jobs))
    else:
        rows = [_run_variant(job) for job in jobs]

    path = write_ablation_csv(rows, Path(args.out) / "ablation.csv")
    print(f"\nAblation table ({len(rows)} variants) saved to: {path}")
    for row in rows:
        print(f"  {row['variant']:22} total={row.get('total') or 0.0:.5f} overlap={row['overlap_fraction']:.2%} "
              f"conformality={row['conformality']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="CycleUV - Neural UV parameterization of point clouds")
    parser.add_argument(
        "--config",
        default="config.yaml",
        help="Path to config file"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def training_options(p):
        p.add_argument("--points", type=int, default=None, help="Training points sampled from the input")
        p.add_argument("--steps", type=int, default=None, help="Total optimization steps")
        p.add_argument("--seed", type=int, default=None, help="Random seed")
        p.add_argument("--distortion", choices=["conformal", "isometric"], default=None,
                       help="Distortion regularization mode")
        p.add_argument("--w-distortion", type=float, default=None, dest="w_distortion",
                       help="Distortion weight (lower it for complex shapes)")

    p = sub.add_parser("parameterize", help="Train on a shape and write a run directory")
    p.add_argument("input", help="OBJ / PLY / XYZ file or builtin:<shape>")
    p.add_argument("--out", default="runs/latest", help="Run directory")
    p.add_argument("--branches", choices=["both", "3d-only", "2d-only"], default=None)
    p.add_argument("--resume", default=None, help="Checkpoint to resume from")
    training_options(p)
    p.set_defaults(func=cmd_parameterize)

    p = sub.add_parser("evaluate", help="Compute metrics for a checkpoint on a shape")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--out", default="metrics.json", help="Output JSON file or directory")
    p.add_argument("--points", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="Run the branch x distortion ablation matrix")
    p.add_argument("input")
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--jobs", type=int, default=1, help="Variants trained in parallel")
    training_options(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="Dense inference and UV artifacts from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--out", default="export")
    p.add_argument("--points", type=int, default=None, help="Surface points sampled from a mesh input (default: its vertices)")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputFormatError, GeometryError) as e:
        logger.error(f"Input error: {e}")
        return EXIT_INPUT
    except (ConfigError, CheckpointError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except TrainingDivergedError as e:
        logger.error(str(e))
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

"""
Data Loader Module - Load shapes, configuration and run manifests.

Supported inputs:
  .obj  - Wavefront OBJ (v / vn / f; polygons are fan-triangulated)
  .ply  - ASCII PLY (vertex x y z [nx ny nz], optional faces)
  .xyz  - whitespace-separated x y z [nx ny nz] per line
  builtin:<name> - reference shapes from data.shapes

Normals are read when present but never used for training.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from core.geometry import PointCloud3, TriangleMesh, sample_mesh_surface
from core.trainer import ConfigError

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
BUILTIN_PREFIX = "builtin:"
DEFAULT_POINTS = 10000

Shape = Union[TriangleMesh, PointCloud3]


class InputFormatError(ValueError):
    """Raised for unreadable or malformed shape files."""

    def __init__(self, path: Union[str, Path], message: str, line: Optional[int] = None):
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")
        self.path = Path(path)
        self.line = line


# ============================================================================
# CONFIGURATION
# ============================================================================

def load_config(config_path: Union[str, Path] = "config.yaml") -> Dict[str, Any]:
    """
    Load configuration from YAML file.

    Args:
        config_path: Path to config file

    Returns:
        Configuration dictionary ({} when the file is missing or empty)

    Raises:
        ConfigError: the file does not parse to a mapping
    """
    try:
        import yaml
    except ImportError:
        raise ImportError("PyYAML is required. Install with: pip install pyyaml")

    path = Path(config_path)
    if not path.exists():
        logger.warning(f"Config file not found: {config_path}, using defaults")
        return {}

    with open(path, 'r') as f:
        try:
            config = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Malformed config {config_path}: {e}") from e
    if config is None:
        return {}
    if not isinstance(config, dict):
        raise ConfigError(f"Config {config_path} must be a mapping of sections, got {type(config).__name__}")
    return config


def save_config_snapshot(config: Dict[str, Any], path: Union[str, Path]) -> Path:
    """Write the resolved configuration as YAML."""
    import yaml

    path = Path(path)
    with open(path, 'w') as f:
        yaml.safe_dump(config, f, sort_keys=False)
    return path


# ============================================================================
# SHAPE READERS
# ============================================================================

def _floats(path: Path, line_no: int, parts: List[str], count: int) -> List[float]:
    if len(parts) < count:
        raise InputFormatError(path, f"expected {count} numbers, got {len(parts)}", line_no)
    try:
        return [float(p) for p in parts[:count]]
    except ValueError:
        raise InputFormatError(path, f"non-numeric value in {' '.join(parts)!r}", line_no)


def _fan(polygon: List[int]) -> List[Tuple[int, int, int]]:
    return [(polygon[0], polygon[i], polygon[i + 1]) for i in range(1, len(polygon) - 1)]


def _parse_obj(path: Path) -> Shape:
    vertices: List[List[float]] = []
    normals: List[List[float]] = []
    faces: List[Tuple[int, int, int]] = []

    with open(path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            keyword, args = parts[0], parts[1:]
            if keyword == "v":
                vertices.append(_floats(path, line_no, args, 3))
            elif keyword == "vn":
                normals.append(_floats(path, line_no, args, 3))
            elif keyword == "f":
                if len(args) < 3:
                    raise InputFormatError(path, "face needs at least 3 vertices", line_no)
                polygon = []
                for token in args:
                    try:
                        index = int(token.split('/')[0])
                    except ValueError:
                        raise InputFormatError(path, f"bad face index {token!r}", line_no)
                    # OBJ indices are 1-based; negative ones count from the end
                    index = index - 1 if index > 0 else len(vertices) + index
                    if not 0 <= index < len(vertices):
                        raise InputFormatError(path, f"face index {token} out of range", line_no)
                    polygon.append(index)
                faces.extend(_fan(polygon))
            # vt, o, g, s, usemtl, mtllib, l, ... are irrelevant here

    if not vertices:
        raise InputFormatError(path, "no vertices found")
    points = np.asarray(vertices, dtype=np.float64)
    vertex_normals = np.asarray(normals) if len(normals) == len(vertices) else None
    if faces:
        return TriangleMesh(points, np.asarray(faces, dtype=np.int64), vertex_normals)
    return PointCloud3(points, vertex_normals)


def _parse_ply(path: Path) -> Shape:
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().splitlines()

    if not lines or lines[0].strip() != "ply":
        raise InputFormatError(path, "missing 'ply' magic", 1)

    elements: List[Tuple[str, int, List[str]]] = []
    body_start = None
    for line_no, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise InputFormatError(path, f"only ascii PLY is supported, got {raw.strip()!r}", line_no)
        elif parts[0] == "element":
            try:
                elements.append((parts[1], int(parts[2]), []))
            except (IndexError, ValueError):
                raise InputFormatError(path, f"bad element line {raw.strip()!r}", line_no)
        elif parts[0] == "property":
            if not elements:
                raise InputFormatError(path, "property before any element", line_no)
            elements[-1][2].append(parts[-1])
        elif parts[0] == "end_header":
            body_start = line_no
            break
        else:
            raise InputFormatError(path, f"unexpected header line {raw.strip()!r}", line_no)
    if body_start is None:
        raise InputFormatError(path, "missing end_header")

    vertices: List[List[float]] = []
    normals: List[List[float]] = []
    faces: List[Tuple[int, int, int]] = []
    cursor = body_start
    for name, count, props in elements:
        for _ in range(count):
            if cursor >= len(lines):
                raise InputFormatError(path, f"file ends inside element '{name}'", cursor)
            line_no = cursor + 1
            parts = lines[cursor].split()
            cursor += 1
            if name == "vertex":
                values = _floats(path, line_no, parts, len(props))
                row = dict(zip(props, values))
                if not all(axis in row for axis in ("x", "y", "z")):
                    raise InputFormatError(path, "vertex element lacks x/y/z", line_no)
                vertices.append([row["x"], row["y"], row["z"]])
                if all(axis in row for axis in ("nx", "ny", "nz")):
                    normals.append([row["nx"], row["ny"], row["nz"]])
            elif name == "face":
                try:
                    n = int(parts[0])
                    polygon = [int(p) for p in parts[1:1 + n]]
                except (IndexError, ValueError):
                    raise InputFormatError(path, f"bad face line {lines[line_no - 1]!r}", line_no)
                if n < 3 or len(polygon) != n or any(not 0 <= i < len(vertices) for i in polygon):
                    raise InputFormatError(path, "invalid face", line_no)
                faces.extend(_fan(polygon))

    if not vertices:
        raise InputFormatError(path, "no vertices found")
    points = np.asarray(vertices, dtype=np.float64)
    vertex_normals = np.asarray(normals) if len(normals) == len(vertices) else None
    if faces:
        return TriangleMesh(points, np.asarray(faces, dtype=np.int64), vertex_normals)
    return PointCloud3(points, vertex_normals)


def _parse_xyz(path: Path) -> PointCloud3:
    points: List[List[float]] = []
    normals: List[List[float]] = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            parts = line.replace(',', ' ').split()
            if len(parts) not in (3, 6):
                raise InputFormatError(path, f"expected 3 or 6 columns, got {len(parts)}", line_no)
            values = _floats(path, line_no, parts, len(parts))
            points.append(values[:3])
            if len(values) == 6:
                normals.append(values[3:])
    if not points:
        raise InputFormatError(path, "no points found")
    vertex_normals = np.asarray(normals) if len(normals) == len(points) else None
    return PointCloud3(np.asarray(points, dtype=np.float64), vertex_normals)


READERS = {".obj": _parse_obj, ".ply": _parse_ply, ".xyz": _parse_xyz}


def parse_inputs(path: Union[str, Path]) -> Shape:
    """
    Read a mesh or point cloud.

    Returns:
        TriangleMesh when the file has faces, otherwise PointCloud3

    Raises:
        InputFormatError: missing file, unknown extension or malformed line
    """
    path_str = str(path)
    if path_str.startswith(BUILTIN_PREFIX):
        from .shapes import builtin_shape
        return builtin_shape(path_str[len(BUILTIN_PREFIX):])

    path = Path(path)
    if not path.exists():
        raise InputFormatError(path, "file not found")
    reader = READERS.get(path.suffix.lower())
    if reader is None:
        raise InputFormatError(path, f"unsupported format '{path.suffix}', expected one of {sorted(READERS)}")
    try:
        shape = reader(path)
    except UnicodeDecodeError as e:
        raise InputFormatError(path, f"not a text file ({e})") from e
    except OSError as e:
        raise InputFormatError(path, str(e)) from e

    if isinstance(shape, TriangleMesh):
        logger.info(f"Loaded mesh {path}: {len(shape.vertices)} vertices, {len(shape.faces)} triangles")
    else:
        logger.info(f"Loaded point cloud {path}: {len(shape)} points")
    return shape


# ============================================================================
# SHAPE WRITERS
# ============================================================================

def write_xyz(cloud: PointCloud3, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, 'w') as f:
        for i, p in enumerate(cloud.points):
            row = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
            if cloud.normals is not None:
                n = cloud.normals[i]
                row += f" {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}"
            f.write(row + "\n")
    return path


def write_obj(shape: Shape, path: Union[str, Path]) -> Path:
    """Write vertices (and 1-based faces for meshes) as Wavefront OBJ."""
    path = Path(path)
    vertices = shape.vertices if isinstance(shape, TriangleMesh) else shape.points
    with open(path, 'w') as f:
        for v in vertices:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        if isinstance(shape, TriangleMesh):
            for a, b, c in shape.faces + 1:
                f.write(f"f {a} {b} {c}\n")
    return path


# ============================================================================
# INPUT PREPARATION
# ============================================================================

@dataclass
class LoadedInput:
    """Training points plus the mesh (if any) used for evaluation."""
    source: str
    format: str
    cloud: PointCloud3
    mesh: Optional[TriangleMesh] = None


class InputLoader:
    """
    Turns an input path into a training cloud.

    Meshes are sampled area-weighted; clouds larger than the requested size
    are subsampled uniformly unless `subsample` is off, which dense
    inference relies on.

    Usage:
        loader = InputLoader(config)
        loaded = loader.load("bunny.obj")
    """

    def __init__(self, config: Dict[str, Any], points: Optional[int] = None, seed: Optional[int] = None,
                 subsample: bool = True):
        input_config = config.get("input", {}) or {}
        training_config = config.get("training", {}) or {}
        self.points = int(points if points is not None else input_config.get("points", DEFAULT_POINTS))
        self.seed = int(seed if seed is not None else training_config.get("seed", 0))
        self.subsample = subsample

    def load(self, path: Union[str, Path]) -> LoadedInput:
        shape = parse_inputs(path)
        source = str(path)
        fmt = "builtin" if source.startswith(BUILTIN_PREFIX) else Path(source).suffix.lower().lstrip(".")

        if isinstance(shape, TriangleMesh):
            cloud = sample_mesh_surface(shape, self.points, self.seed)
            logger.info(f"Sampled {len(cloud)} surface points from the mesh")
            return LoadedInput(source, fmt, cloud, shape)

        if self.subsample and len(shape) > self.points:
            rng = np.random.default_rng(self.seed)
            keep = np.sort(rng.choice(len(shape), size=self.points, replace=False))
            logger.info(f"Subsampled {self.points} of {len(shape)} points")
            shape = PointCloud3(shape.points[keep], None if shape.normals is None else shape.normals[keep])
        return LoadedInput(source, fmt, shape, None)


# ============================================================================
# RUN MANIFEST
# ============================================================================

@dataclass
class RunManifest:
    """Everything needed to reproduce a run directory."""
    command: str
    input_path: str
    input_format: str
    output_dir: str
    seed: int
    config: Dict[str, Any] = field(default_factory=dict)
    overrides: Dict[str, Any] = field(default_factory=dict)
    points: Optional[int] = None
    tool_version: str = TOOL_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunManifest":
        with open(path, 'r') as f:
            return cls(**json.load(f))

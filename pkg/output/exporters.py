"""
Exporters Module - Write run artifacts.

  uv.obj        vertices with min-max normalized texture coordinates
  uv.svg        UV scatter colored by learned normals, seams highlighted
  metrics.json  MetricReport
  seams.json    SeamSet
  ablation.csv  one row per ablation variant
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from reportlab.graphics import renderSVG
from reportlab.graphics.shapes import Circle, Drawing, Rect
from reportlab.lib import colors

from core.geometry import PointCloud3, TriangleMesh, UvCloud

logger = logging.getLogger(__name__)

SVG_SIZE = 512
SVG_MARGIN = 16
SEAM_COLOR = (0.85, 0.1, 0.1)
DEFAULT_COLOR = (0.2, 0.4, 0.8)


def _coords(uv: Union[UvCloud, np.ndarray]) -> np.ndarray:
    return uv.coords if isinstance(uv, UvCloud) else np.asarray(uv, dtype=np.float64).reshape(-1, 2)


def normalize_uv(uv: Union[UvCloud, np.ndarray]) -> np.ndarray:
    """
    Map UVs into [0, 1]^2 with one scale for both axes.

    The bounding box's longer side becomes 1, so angles are preserved.
    The shorter axis covers only [0, short / long]; texels past it stay unused.
    """
    coords = _coords(uv)
    if len(coords) == 0:
        return coords.copy()
    low = coords.min(axis=0)
    side = float(np.max(coords.max(axis=0) - low))
    if side <= 0.0:
        return np.zeros_like(coords)
    return np.clip((coords - low) / side, 0.0, 1.0)


def export_uv_obj(
    target: Union[TriangleMesh, PointCloud3, np.ndarray],
    uv: Union[UvCloud, np.ndarray],
    path: Union[str, Path],
) -> Path:
    """
    Write v / vt lines, plus f v/vt faces when target is a mesh.

    Row i of uv belongs to vertex i; vertex and texture indices coincide.
    """
    path = Path(path)
    if isinstance(target, TriangleMesh):
        vertices, faces = target.vertices, target.faces
    elif isinstance(target, PointCloud3):
        vertices, faces = target.points, None
    else:
        vertices, faces = np.asarray(target, dtype=np.float64).reshape(-1, 3), None
    texcoords = normalize_uv(uv)
    if len(texcoords) != len(vertices):
        raise ValueError(f"{len(vertices)} vertices but {len(texcoords)} UVs")

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        f.write(f"# {len(vertices)} vertices with UVs\n")
        for v in vertices:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in texcoords:
            f.write(f"vt {t[0]:.17g} {t[1]:.17g}\n")
        if faces is not None:
            for face in faces + 1:
                f.write("f " + " ".join(f"{i}/{i}" for i in face) + "\n")
    logger.info(f"Wrote {path}")
    return path


def normals_to_colors(normals: np.ndarray) -> np.ndarray:
    """Unit normals to RGB in [0, 1]: (n + 1) / 2."""
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    return np.clip((normals + 1.0) / 2.0, 0.0, 1.0)


def _uv_to_viewport(
    coords: np.ndarray,
    size: float = SVG_SIZE,
    margin: float = SVG_MARGIN,
) -> np.ndarray:
    """
    Affinely map the UV bounding box into the square drawing area.

    The box's lower-left corner goes to (margin, margin); the longer side
    spans size - 2 * margin.
    """
    if len(coords) == 0:
        return coords.copy()
    low = coords.min(axis=0)
    side = float(np.max(coords.max(axis=0) - low))
    scale = (size - 2 * margin) / side if side > 0.0 else 0.0
    return margin + (coords - low) * scale


def export_uv_svg(
    uv: Union[UvCloud, np.ndarray],
    colors_rgb: Optional[np.ndarray],
    path: Union[str, Path],
    seams: Optional[Sequence[int]] = None,
    size: int = SVG_SIZE,
    radius: float = 1.5,
) -> Path:
    """
    One filled circle per UV point.

    Args:
        uv: Points to draw
        colors_rgb: Per-point RGB in [0, 1] (None = a single color)
        path: Output file
        seams: Indices drawn in the seam color, on top of the others
        size: Viewport side in pixels
        radius: Circle radius in pixels
    """
    coords = _coords(uv)
    if colors_rgb is not None and len(colors_rgb) != len(coords):
        raise ValueError(f"{len(coords)} UVs but {len(colors_rgb)} colors")

    drawing = Drawing(size, size)
    drawing.add(Rect(0, 0, size, size, fillColor=colors.white, strokeColor=None))
    screen = _uv_to_viewport(coords, size)

    seam_mask = np.zeros(len(coords), dtype=bool)
    if seams is not None and len(seams):
        seam_mask[np.asarray(seams, dtype=np.int64)] = True

    order = np.concatenate([np.flatnonzero(~seam_mask), np.flatnonzero(seam_mask)])
    for i in order:
        if seam_mask[i]:
            rgb = SEAM_COLOR
        elif colors_rgb is not None:
            rgb = tuple(float(c) for c in colors_rgb[i])
        else:
            rgb = DEFAULT_COLOR
        drawing.add(Circle(
            float(screen[i, 0]), float(screen[i, 1]), radius,
            fillColor=colors.Color(*rgb), strokeColor=None,
        ))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    renderSVG.drawToFile(drawing, str(path))
    logger.info(f"Wrote {path} ({len(coords)} points, {int(seam_mask.sum())} on seams)")
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_json(data: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(_jsonable(data), f, indent=2)
    return path


def write_metrics_json(report: Any, path: Union[str, Path]) -> Path:
    """Serialize a MetricReport (or any object with to_dict)."""
    data = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    return write_json(data, path)


ABLATION_COLUMNS = [
    "variant", "branches", "distortion_mode", "seed",
    "unwrap", "wrap", "cycle", "distortion", "aflip", "total",
    "conformality", "conformality_source", "flip_fraction", "overlap_fraction",
    "chamfer", "isometric_residual", "seam_fraction",
]


def write_ablation_csv(rows: List[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """One row per variant; unknown keys are dropped, missing ones left blank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _jsonable(v) for k, v in row.items()})
    logger.info(f"Wrote {path} ({len(rows)} variants)")
    return path

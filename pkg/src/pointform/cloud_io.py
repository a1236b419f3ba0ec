"""Readers and writers for ASCII point-cloud files.

Supported formats:
  * XYZ — one ``x y z`` triple per line, whitespace separated.
  * PLY — ASCII variant with float ``x``/``y``/``z`` vertex properties; extra
    properties are tolerated on read. Writers can attach one scalar ``score``
    property per vertex for downstream coloring.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError
from .geometry import PointCloud


def read_xyz(path) -> PointCloud:
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) < 3:
                raise ParseError(f"expected 3 coordinates, got {len(parts)}", line=lineno)
            try:
                points.append([float(parts[0]), float(parts[1]), float(parts[2])])
            except ValueError as exc:
                raise ParseError(f"bad float: {exc}", line=lineno) from None
    if not points:
        raise ParseError("file contains no points")
    return PointCloud(np.array(points))


def write_xyz(path, pc: PointCloud):
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in pc.points.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def read_ply(path) -> PointCloud:
    """Parse an ASCII PLY file; only the vertex element's x/y/z are consumed."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", line=1)

    vertex_count = None
    properties = []
    in_vertex_element = False
    body_start = None
    fmt_seen = False
    for lineno, raw in enumerate(lines[1:], start=2):
        parts = raw.split()
        if not parts:
            continue
        keyword = parts[0]
        if keyword == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise ParseError(f"unsupported format {' '.join(parts[1:])!r}", line=lineno)
            fmt_seen = True
        elif keyword == "element":
            in_vertex_element = parts[1] == "vertex"
            if in_vertex_element:
                try:
                    vertex_count = int(parts[2])
                except (IndexError, ValueError):
                    raise ParseError("bad vertex element declaration", line=lineno) from None
        elif keyword == "property" and in_vertex_element:
            properties.append(parts[-1])
        elif keyword == "end_header":
            body_start = lineno
            break
        elif keyword == "comment":
            continue
    if body_start is None:
        raise ParseError("missing end_header")
    if not fmt_seen:
        raise ParseError("missing format declaration")
    if vertex_count is None:
        raise ParseError("no vertex element declared")
    for axis in ("x", "y", "z"):
        if axis not in properties:
            raise ParseError(f"vertex element lacks property {axis!r}")
    col = {name: i for i, name in enumerate(properties)}

    points = np.empty((vertex_count, 3), dtype=np.float64)
    row = 0
    for lineno, raw in enumerate(lines[body_start:], start=body_start + 1):
        stripped = raw.strip()
        if not stripped:
            continue
        if row >= vertex_count:
            break
        parts = stripped.split()
        if len(parts) < len(properties):
            raise ParseError(
                f"expected {len(properties)} values, got {len(parts)}", line=lineno
            )
        try:
            points[row] = [float(parts[col["x"]]), float(parts[col["y"]]), float(parts[col["z"]])]
        except ValueError as exc:
            raise ParseError(f"bad float: {exc}", line=lineno) from None
        row += 1
    if row != vertex_count:
        raise ParseError(f"declared {vertex_count} vertices, found {row}")
    return PointCloud(points)


def write_ply(path, pc: PointCloud, scores=None):
    """Write an ASCII PLY; ``scores`` adds one float ``score`` per vertex."""
    points = pc.points
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (points.shape[0],):
            raise ValueError(f"scores shape {scores.shape} does not match {points.shape[0]} points")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {points.shape[0]}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if scores is not None:
            fh.write("property float score\n")
        fh.write("end_header\n")
        rows = points.tolist()
        score_list = scores.tolist() if scores is not None else None
        for i, (x, y, z) in enumerate(rows):
            if score_list is not None:
                fh.write(f"{x!r} {y!r} {z!r} {score_list[i]!r}\n")
            else:
                fh.write(f"{x!r} {y!r} {z!r}\n")


def read_cloud(path) -> PointCloud:
    """Dispatch on extension: .xyz or .ply."""
    suffix = Path(path).suffix.lower()
    if suffix == ".xyz":
        return read_xyz(path)
    if suffix == ".ply":
        return read_ply(path)
    raise ParseError(f"unsupported point-cloud extension {suffix!r}")

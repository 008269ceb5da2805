"""ASCII point-cloud IO: XYZ read/write and PLY export with expert labels."""

from __future__ import annotations

import numpy as np

from .errors import ParseError
from .geometry import PointCloud


def read_cloud(path) -> PointCloud:
    """Read an ASCII XYZ file: one `x y z` triple per line, `#` comments allowed."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3:
                raise ParseError(f"expected 3 values, got {len(parts)}",
                                 path=str(path), line=lineno)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(f"non-numeric token in {parts!r}",
                                 path=str(path), line=lineno) from None
    if not rows:
        raise ParseError("no points in file", path=str(path))
    return PointCloud(np.asarray(rows))


def write_cloud(cloud: PointCloud, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in cloud.points:
            fh.write(f"{x:.10g} {y:.10g} {z:.10g}\n")


def write_ply(points: np.ndarray, path, expert: np.ndarray | None = None) -> None:
    """ASCII PLY export with an optional per-point integer `expert` property."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if expert is not None:
        expert = np.asarray(expert, dtype=np.int64).reshape(-1)
        if len(expert) != len(pts):
            raise ValueError("expert labels must align with points")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if expert is not None:
            fh.write("property int expert\n")
        fh.write("end_header\n")
        for i, (x, y, z) in enumerate(pts):
            if expert is not None:
                fh.write(f"{x:.7g} {y:.7g} {z:.7g} {int(expert[i])}\n")
            else:
                fh.write(f"{x:.7g} {y:.7g} {z:.7g}\n")

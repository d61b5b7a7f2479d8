"""Point-cloud data model and ASCII file I/O.

Positions are metric xyz, colors are RGB in [0, 1].  Normals are optional;
rows of NaN mark points whose normal could not be estimated.  Arrays are
frozen after construction so clouds can be shared across workers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CloudParseError, EmptyCloudError

PLY_FORMAT = "ply-ascii"
CSV_FORMAT = "xyzrgb-csv"

# Shortest-round-trip float formatting keeps save/load lossless well below
# the 1e-6 coordinate tolerance.
_FMT = "%.9g"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PointCloud:
    """Immutable cloud of 3D points with per-point RGB and optional normals."""

    positions: np.ndarray               # (N, 3) meters
    colors: np.ndarray                  # (N, 3) in [0, 1]
    normals: Optional[np.ndarray] = field(default=None)   # (N, 3) unit or NaN

    def __post_init__(self):
        pos = _frozen(np.atleast_2d(self.positions))
        col = _frozen(np.atleast_2d(self.colors))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {pos.shape}")
        if col.shape != pos.shape:
            raise ValueError(f"colors shape {col.shape} != positions shape {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions contain NaN or Inf")
        if col.size and (col.min() < -1e-9 or col.max() > 1 + 1e-9):
            raise ValueError("color channels must lie in [0, 1]")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        if self.normals is not None:
            nrm = _frozen(np.atleast_2d(self.normals))
            if nrm.shape != pos.shape:
                raise ValueError(f"normals shape {nrm.shape} != positions shape {pos.shape}")
            finite = np.all(np.isfinite(nrm), axis=1)
            lengths = np.linalg.norm(nrm[finite], axis=1)
            if lengths.size and np.any(np.abs(lengths - 1.0) > 1e-6):
                raise ValueError("finite normals must have unit length (within 1e-6)")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def valid_normal_mask(self) -> np.ndarray:
        """Boolean mask of points whose normal was successfully estimated."""
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        return np.all(np.isfinite(self.normals), axis=1)

    def select(self, indices) -> "PointCloud":
        """New cloud restricted to the given point indices (order preserved)."""
        idx = np.asarray(indices)
        return PointCloud(
            self.positions[idx],
            self.colors[idx],
            None if self.normals is None else self.normals[idx],
        )

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "PointCloud":
        """Rigidly moved copy; normals rotate with the points."""
        rot = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        pos = self.positions @ rot.T + t
        nrm = None if self.normals is None else self.normals @ rot.T
        return PointCloud(pos, self.colors, nrm)


def make_cloud(positions, colors=None, normals=None) -> PointCloud:
    """Convenience constructor; colors default to black."""
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if colors is None:
        colors = np.zeros_like(pos)
    return PointCloud(pos, colors, normals)


# ---------------------------------------------------------------------------
# File I/O

def load_cloud(path, format: str) -> PointCloud:
    """Load a cloud from `path` in the declared format.

    Colors default to (0,0,0) when the file carries none.  Malformed input
    raises CloudParseError naming the offending line.
    """
    path = Path(path)
    if format == PLY_FORMAT:
        return _load_ply(path)
    if format == CSV_FORMAT:
        return _load_csv(path)
    raise ValueError(f"unknown cloud format {format!r}")


def save_cloud(cloud: PointCloud, path, format: str) -> None:
    """Write `cloud` to `path`; load(save(c)) reproduces coordinates to 1e-6
    and colors to 1/255."""
    if len(cloud) == 0:
        raise EmptyCloudError("refusing to save an empty cloud")
    path = Path(path)
    if format == PLY_FORMAT:
        _save_ply(cloud, path)
    elif format == CSV_FORMAT:
        _save_csv(cloud, path)
    else:
        raise ValueError(f"unknown cloud format {format!r}")


def _load_ply(path: Path) -> PointCloud:
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudParseError(path, 1, "missing 'ply' magic")

    n_vertex = None
    properties = []          # names in declared order
    in_vertex_element = False
    body_start = None
    for i, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise CloudParseError(path, i, f"unsupported format {' '.join(tok[1:])!r}")
        elif tok[0] == "element":
            if tok[1] == "vertex":
                try:
                    n_vertex = int(tok[2])
                except (IndexError, ValueError):
                    raise CloudParseError(path, i, "malformed vertex element count")
                in_vertex_element = True
            else:
                in_vertex_element = False
        elif tok[0] == "property" and in_vertex_element:
            properties.append(tok[-1])
        elif tok[0] == "end_header":
            body_start = i
            break
    if body_start is None:
        raise CloudParseError(path, len(lines), "missing end_header")
    if n_vertex is None:
        raise CloudParseError(path, body_start, "header declares no vertex element")
    if n_vertex == 0:
        raise CloudParseError(path, body_start, "empty cloud")

    for axis in ("x", "y", "z"):
        if axis not in properties:
            raise CloudParseError(path, body_start, f"vertex element lacks property {axis!r}")
    has_color = all(c in properties for c in ("red", "green", "blue"))
    has_normals = all(c in properties for c in ("nx", "ny", "nz"))
    col_of = {name: k for k, name in enumerate(properties)}

    rows = np.empty((n_vertex, len(properties)), dtype=np.float64)
    for r in range(n_vertex):
        line_no = body_start + 1 + r
        if line_no > len(lines):
            raise CloudParseError(path, line_no, f"expected {n_vertex} vertices, file ends early")
        tok = lines[line_no - 1].split()
        if len(tok) != len(properties):
            raise CloudParseError(
                path, line_no, f"expected {len(properties)} fields, got {len(tok)}")
        try:
            rows[r] = [float(t) for t in tok]
        except ValueError:
            raise CloudParseError(path, line_no, "non-numeric field")

    pos = rows[:, [col_of["x"], col_of["y"], col_of["z"]]]
    if has_color:
        col = rows[:, [col_of["red"], col_of["green"], col_of["blue"]]] / 255.0
        col = np.clip(col, 0.0, 1.0)
    else:
        col = np.zeros_like(pos)
    nrm = None
    if has_normals:
        nrm = rows[:, [col_of["nx"], col_of["ny"], col_of["nz"]]]
    return PointCloud(pos, col, nrm)


def _save_ply(cloud: PointCloud, path: Path) -> None:
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
    ]
    if cloud.has_normals:
        header += ["property float nx", "property float ny", "property float nz"]
    header.append("end_header")

    colors8 = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(int)
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for i in range(len(cloud)):
            x, y, z = cloud.positions[i]
            r, g, b = colors8[i]
            line = f"{_FMT % x} {_FMT % y} {_FMT % z} {r} {g} {b}"
            if cloud.has_normals:
                nx, ny, nz = cloud.normals[i]
                line += f" {_FMT % nx} {_FMT % ny} {_FMT % nz}"
            fh.write(line + "\n")


def _load_csv(path: Path) -> PointCloud:
    positions, colors = [], []
    n_cols = None
    with open(path, "r") as fh:
        for i, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            tok = raw.split(",")
            if n_cols is None:
                if len(tok) not in (3, 6):
                    raise CloudParseError(path, i, f"expected 3 or 6 columns, got {len(tok)}")
                n_cols = len(tok)
            elif len(tok) != n_cols:
                raise CloudParseError(path, i, f"expected {n_cols} columns, got {len(tok)}")
            try:
                vals = [float(t) for t in tok]
            except ValueError:
                raise CloudParseError(path, i, "non-numeric field")
            positions.append(vals[:3])
            colors.append([v / 255.0 for v in vals[3:]] if n_cols == 6 else [0.0, 0.0, 0.0])
    if not positions:
        raise CloudParseError(path, 1, "empty cloud")
    return PointCloud(np.array(positions), np.clip(np.array(colors), 0.0, 1.0))


def _save_csv(cloud: PointCloud, path: Path) -> None:
    colors8 = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(int)
    with open(path, "w") as fh:
        for i in range(len(cloud)):
            x, y, z = cloud.positions[i]
            r, g, b = colors8[i]
            fh.write(f"{_FMT % x},{_FMT % y},{_FMT % z},{r},{g},{b}\n")


# ---------------------------------------------------------------------------
# Basic geometry utilities

def compute_resolution(cloud: PointCloud) -> float:
    """Mean distance from each point to its nearest distinct neighbor.

    Basis for every scale-relative radius in the pipeline.  Coincident
    duplicates contribute zero and trigger a warning.
    """
    from .neighbors import NeighborIndex

    if len(cloud) < 2:
        raise EmptyCloudError("resolution needs at least 2 points")
    index = NeighborIndex(cloud.positions)
    _, dists = index.knn(cloud.positions, k=2)
    nearest = dists[:, 1]
    if np.any(nearest == 0.0):
        warnings.warn("cloud contains coincident duplicate points")
    return float(nearest.mean())


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """One point per occupied voxel, at the centroid of its members.

    Output order follows first occurrence of each voxel in the input, so the
    result is deterministic for a fixed input ordering.
    """
    if leaf <= 0:
        raise ValueError("leaf size must be positive")
    cells = np.floor(cloud.positions / leaf).astype(np.int64)
    groups: dict = {}
    for i, cell in enumerate(map(tuple, cells)):
        groups.setdefault(cell, []).append(i)
    pos = np.empty((len(groups), 3))
    col = np.empty((len(groups), 3))
    for k, members in enumerate(groups.values()):
        pos[k] = cloud.positions[members].mean(axis=0)
        col[k] = cloud.colors[members].mean(axis=0)
    return PointCloud(pos, col)

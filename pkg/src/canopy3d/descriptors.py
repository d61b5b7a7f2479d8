"""Descriptor set container, dispatch over descriptor kinds, and file IO."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .cloud import PointCloud
from .errors import CloudParseError, PipelineError
from .fpfh import FPFH_DIM, fpfh_rows
from .neighbors import NeighborIndex
from .rops import ROPS_DIM, rops_rows
from .shot import SHOT_DIM, shot_rows

DESCRIPTOR_DIMS = {"fpfh": FPFH_DIM, "shot": SHOT_DIM, "rops": ROPS_DIM}
DEFAULT_SUPPORT_FACTOR = 8.0


@dataclass(frozen=True)
class DescriptorSet:
    kind: str
    keypoints: np.ndarray        # (n,) indices into the source cloud
    positions: np.ndarray        # (n, 3) keypoint positions
    rows: np.ndarray             # (n, d)

    def __post_init__(self):
        if self.kind not in DESCRIPTOR_DIMS:
            raise ValueError(f"unknown descriptor kind: {self.kind!r}")
        n = len(self.keypoints)
        if self.positions.shape != (n, 3) or self.rows.shape[0] != n:
            raise ValueError("keypoints, positions, and rows must align")
        if self.rows.ndim != 2 or self.rows.shape[1] != DESCRIPTOR_DIMS[self.kind]:
            raise ValueError(
                f"{self.kind} rows must have dimension "
                f"{DESCRIPTOR_DIMS[self.kind]}, got {self.rows.shape}")

    def __len__(self):
        return len(self.keypoints)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def compute_descriptors(cloud: PointCloud, keypoints: np.ndarray, kind: str,
                        radius: float,
                        index: Optional[NeighborIndex] = None) -> DescriptorSet:
    """Compute descriptors of the given kind at the keypoint indices."""
    if kind not in DESCRIPTOR_DIMS:
        raise PipelineError(f"unknown descriptor kind: {kind!r}")
    if not cloud.has_normals:
        raise PipelineError("descriptors require normals")
    index = index or NeighborIndex(cloud.positions)
    if kind == "fpfh":
        kept, rows = fpfh_rows(cloud, keypoints, radius, index)
    elif kind == "shot":
        kept, rows, _ = shot_rows(cloud, keypoints, radius, index)
    else:
        kept, rows = rops_rows(cloud, keypoints, radius, index=index)
    return DescriptorSet(kind, kept, cloud.positions[kept], rows)


def save_descriptors(ds: DescriptorSet, path) -> None:
    """Write `KIND/DIM/COUNT` header plus rows; keypoints go to a .kp file."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(f"KIND {ds.kind}\nDIM {ds.dim}\nCOUNT {len(ds)}\n")
        for row in ds.rows:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    with open(path.with_suffix(".kp"), "w") as fh:
        for idx, pos in zip(ds.keypoints, ds.positions):
            fh.write(f"{idx} " + " ".join(repr(float(v)) for v in pos) + "\n")


def load_descriptors(path) -> DescriptorSet:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    try:
        kind = lines[0].split()[1]
        dim = int(lines[1].split()[1])
        count = int(lines[2].split()[1])
    except (IndexError, ValueError) as exc:
        raise CloudParseError(str(path), 1, f"bad descriptor header: {exc}")
    if len(lines) < 3 + count:
        raise CloudParseError(str(path), len(lines),
                              f"expected {count} rows, found {len(lines) - 3}")
    rows = np.empty((count, dim))
    for r in range(count):
        vals = lines[3 + r].split()
        if len(vals) != dim:
            raise CloudParseError(str(path), 4 + r,
                                  f"expected {dim} values, got {len(vals)}")
        rows[r] = [float(v) for v in vals]

    kp_path = path.with_suffix(".kp")
    keypoints = np.empty(count, dtype=np.int64)
    positions = np.empty((count, 3))
    with open(kp_path) as fh:
        kp_lines = fh.read().splitlines()
    if len(kp_lines) < count:
        raise CloudParseError(str(kp_path), len(kp_lines),
                              f"expected {count} keypoints")
    for r in range(count):
        vals = kp_lines[r].split()
        keypoints[r] = int(vals[0])
        positions[r] = [float(v) for v in vals[1:4]]
    return DescriptorSet(kind, keypoints, positions, rows)

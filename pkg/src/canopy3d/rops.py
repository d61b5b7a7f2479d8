"""RoPS descriptor: statistics of rotated projections of the support.

Support points (in the keypoint's local frame) are rotated about each
frame axis through a small set of angles; after every rotation they are
projected on the three coordinate planes and summarized by a bins x bins
distribution matrix.  Four central moments plus Shannon entropy of each
matrix concatenate into the descriptor.  Projections replace the original
mesh formulation; points carry uniform weight.
"""

from __future__ import annotations

import warnings
from typing import Optional, Tuple

import numpy as np

from .cloud import PointCloud
from .lrf import compute_lrf
from .neighbors import NeighborIndex

N_AXES = 3
N_ROTATIONS = 3
N_PLANES = 3
N_STATS = 5
ROPS_DIM = N_AXES * N_ROTATIONS * N_PLANES * N_STATS   # 135
DEFAULT_BINS = 5
MIN_NEIGHBORS = 5

_PLANE_COORDS = ((0, 1), (1, 2), (0, 2))    # xy, yz, xz


def _axis_rotation(axis: int, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    if axis == 0:
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == 1:
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _matrix_stats(dist: np.ndarray) -> np.ndarray:
    """mu11, mu12, mu21, mu22 central moments (bin-index coords) + entropy."""
    rows, cols = dist.shape
    i = np.arange(rows)[:, None]
    j = np.arange(cols)[None, :]
    ibar = float((i * dist).sum())
    jbar = float((j * dist).sum())
    di = i - ibar
    dj = j - jbar
    mu = [float((di ** a * dj ** b * dist).sum())
          for a, b in ((1, 1), (1, 2), (2, 1), (2, 2))]
    nz = dist[dist > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    return np.array(mu + [entropy])


def rops_descriptor(support: np.ndarray, center: np.ndarray,
                    frame: np.ndarray, radius: float,
                    rotations: int = N_ROTATIONS,
                    bins: int = DEFAULT_BINS) -> np.ndarray:
    """Single RoPS row from support points and a precomputed LRF."""
    local = (support - center) @ frame.T
    out = []
    for axis in range(N_AXES):
        for t in range(rotations):
            angle = 2.0 * np.pi * t / rotations
            rotated = local @ _axis_rotation(axis, angle).T
            for a, b in _PLANE_COORDS:
                coords = rotated[:, (a, b)]
                scaled = (coords + radius) / (2.0 * radius) * bins
                idx = np.clip(scaled.astype(np.int64), 0, bins - 1)
                dist = np.zeros((bins, bins))
                np.add.at(dist, (idx[:, 0], idx[:, 1]), 1.0)
                dist /= dist.sum()
                out.append(_matrix_stats(dist))
    return np.concatenate(out)


def rops_rows(cloud: PointCloud, keypoints: np.ndarray, radius: float,
              rotations: int = N_ROTATIONS, bins: int = DEFAULT_BINS,
              index: Optional[NeighborIndex] = None,
              ) -> Tuple[np.ndarray, np.ndarray]:
    """RoPS at keypoint indices; under-supported or degenerate ones dropped."""
    index = index or NeighborIndex(cloud.positions)
    pos = cloud.positions

    kept, rows = [], []
    for kp in np.asarray(keypoints, dtype=np.int64):
        nbr = np.asarray(index._tree.query_ball_point(pos[kp], radius),
                         dtype=np.int64)
        nbr = np.sort(nbr[nbr != kp])
        if len(nbr) < MIN_NEIGHBORS:
            warnings.warn(f"keypoint {kp}: fewer than {MIN_NEIGHBORS} "
                          "neighbors, descriptor skipped")
            continue
        frame = compute_lrf(pos[nbr], pos[kp], radius)
        if frame is None:
            warnings.warn(f"keypoint {kp}: degenerate reference frame, "
                          "descriptor skipped")
            continue
        rows.append(rops_descriptor(pos[nbr], pos[kp], frame, radius,
                                    rotations, bins))
        kept.append(kp)
    dim = N_AXES * rotations * N_PLANES * N_STATS
    if not kept:
        return np.empty(0, dtype=np.int64), np.empty((0, dim))
    return np.asarray(kept), np.vstack(rows)

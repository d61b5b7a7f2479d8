"""SHOT descriptor: histograms of normal cosines over 32 spatial sectors.

Sectors split the support ball by 8 azimuth wedges, 2 elevation halves,
and 2 radial shells in the keypoint's local reference frame.  Each
neighbor contributes the cosine between its normal and the keypoint
normal, soft-assigned quadrilinearly across the four binning axes.
"""

from __future__ import annotations

import warnings
from typing import Optional, Tuple

import numpy as np

from .cloud import PointCloud
from .lrf import compute_lrf
from .neighbors import NeighborIndex

N_AZIMUTH = 8
N_ELEVATION = 2
N_RADIAL = 2
N_COSINE = 11
SHOT_DIM = N_AZIMUTH * N_ELEVATION * N_RADIAL * N_COSINE   # 352
MIN_NEIGHBORS = 5


def _soft_coords(value: np.ndarray, n_bins: int, lo: float, hi: float,
                 wrap: bool) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split values into (lower bin, upper bin, upper weight).

    Bin centers sit at (i + 0.5) * width; weight is linear between the two
    nearest centers.  Azimuth wraps; the other axes clamp at the edges.
    """
    c = (value - lo) / (hi - lo) * n_bins - 0.5
    i0 = np.floor(c).astype(np.int64)
    frac = c - i0
    i1 = i0 + 1
    if wrap:
        i0 %= n_bins
        i1 %= n_bins
    else:
        i0 = np.clip(i0, 0, n_bins - 1)
        i1 = np.clip(i1, 0, n_bins - 1)
    return i0, i1, frac


def shot_descriptor(support: np.ndarray, support_normals: np.ndarray,
                    center: np.ndarray, center_normal: np.ndarray,
                    frame: np.ndarray, radius: float) -> np.ndarray:
    """Single SHOT row given the support (center excluded) and its LRF."""
    rel = support - center
    local = rel @ frame.T
    dist = np.linalg.norm(local, axis=1)
    ok = dist > 0
    local, dist, normals = local[ok], dist[ok], support_normals[ok]

    azimuth = np.arctan2(local[:, 1], local[:, 0])
    elevation = local[:, 2] / dist
    cosine = normals @ center_normal

    hist = np.zeros((N_AZIMUTH, N_ELEVATION, N_RADIAL, N_COSINE))
    a0, a1, af = _soft_coords(azimuth, N_AZIMUTH, -np.pi, np.pi, wrap=True)
    e0, e1, ef = _soft_coords(elevation, N_ELEVATION, -1.0, 1.0, wrap=False)
    r0, r1, rf = _soft_coords(dist, N_RADIAL, 0.0, radius, wrap=False)
    c0, c1, cf = _soft_coords(cosine, N_COSINE, -1.0, 1.0, wrap=False)

    for ai, aw in ((a0, 1 - af), (a1, af)):
        for ei, ew in ((e0, 1 - ef), (e1, ef)):
            for ri, rw in ((r0, 1 - rf), (r1, rf)):
                for ci, cw in ((c0, 1 - cf), (c1, cf)):
                    np.add.at(hist, (ai, ei, ri, ci), aw * ew * rw * cw)

    flat = hist.ravel()
    norm = np.linalg.norm(flat)
    return flat / norm if norm > 0 else flat


def shot_rows(cloud: PointCloud, keypoints: np.ndarray, radius: float,
              index: Optional[NeighborIndex] = None,
              ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SHOT at keypoint indices; returns (kept, rows, frames).

    Keypoints with under 5 neighbors or a degenerate frame are dropped
    with a warning.  frames[i] is the (3, 3) LRF of kept[i].
    """
    index = index or NeighborIndex(cloud.positions)
    pos, nrm = cloud.positions, cloud.normals
    valid = cloud.valid_normal_mask()

    kept, rows, frames = [], [], []
    for kp in np.asarray(keypoints, dtype=np.int64):
        nbr = np.asarray(index._tree.query_ball_point(pos[kp], radius),
                         dtype=np.int64)
        nbr = np.sort(nbr[(nbr != kp) & valid[nbr]])
        if len(nbr) < MIN_NEIGHBORS:
            warnings.warn(f"keypoint {kp}: fewer than {MIN_NEIGHBORS} "
                          "neighbors, descriptor skipped")
            continue
        frame = compute_lrf(pos[nbr], pos[kp], radius)
        if frame is None:
            warnings.warn(f"keypoint {kp}: degenerate reference frame, "
                          "descriptor skipped")
            continue
        rows.append(shot_descriptor(pos[nbr], nrm[nbr], pos[kp], nrm[kp],
                                    frame, radius))
        frames.append(frame)
        kept.append(kp)
    if not kept:
        return (np.empty(0, dtype=np.int64), np.empty((0, SHOT_DIM)),
                np.empty((0, 3, 3)))
    return np.asarray(kept), np.vstack(rows), np.stack(frames)

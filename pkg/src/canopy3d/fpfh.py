"""Fast Point Feature Histograms (33-dim).

Per-point SPFH histograms bin the Darboux-frame angle triple of each
(point, neighbor) pair into three 11-bin blocks; the final descriptor
re-weights neighbor SPFHs by inverse distance and normalizes each block
to sum 100.
"""

from __future__ import annotations

import warnings
from typing import List, Optional, Tuple

import numpy as np

from .cloud import PointCloud
from .neighbors import NeighborIndex

FPFH_DIM = 33
N_BINS = 11
MIN_NEIGHBORS = 5
_PAIR_EPS = 1e-12


def _bin_counts(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    scaled = (values - lo) / (hi - lo) * N_BINS
    idx = np.clip(scaled.astype(np.int64), 0, N_BINS - 1)
    return np.bincount(idx, minlength=N_BINS).astype(float)


def spfh(positions: np.ndarray, normals: np.ndarray, i: int,
         neighbors: np.ndarray) -> np.ndarray:
    """Raw (unnormalized) 33-bin SPFH of point i over the given neighbors."""
    hist = np.zeros(FPFH_DIM)
    if len(neighbors) == 0:
        return hist
    d = positions[neighbors] - positions[i]
    dist = np.linalg.norm(d, axis=1)
    ok = dist > 0
    d, dist = d[ok], dist[ok]
    n2 = normals[neighbors][ok]
    if len(d) == 0:
        return hist
    dhat = d / dist[:, None]
    u = normals[i]
    v = np.cross(dhat, u)
    vnorm = np.linalg.norm(v, axis=1)
    ok = vnorm >= _PAIR_EPS             # skip pairs with direction ∥ normal
    if not ok.any():
        return hist
    v = v[ok] / vnorm[ok][:, None]
    dhat, n2 = dhat[ok], n2[ok]
    w = np.cross(u, v)
    alpha = np.sum(v * n2, axis=1)
    phi = dhat @ u
    theta = np.arctan2(np.sum(w * n2, axis=1), n2 @ u)
    hist[0:11] = _bin_counts(alpha, -1.0, 1.0)
    hist[11:22] = _bin_counts(phi, -1.0, 1.0)
    hist[22:33] = _bin_counts(theta, -np.pi, np.pi)
    return hist


def _neighbor_lists(index: NeighborIndex, positions: np.ndarray,
                    targets: np.ndarray, radius: float,
                    valid: np.ndarray) -> List[np.ndarray]:
    raw = index._tree.query_ball_point(positions[targets], radius)
    out = []
    for t, nbr in zip(targets, raw):
        nbr = np.asarray(nbr, dtype=np.int64)
        nbr = np.sort(nbr[(nbr != t) & valid[nbr]])   # fixed summation order
        out.append(nbr)
    return out


def _normalize_blocks(rows: np.ndarray) -> np.ndarray:
    out = rows.copy()
    for block in range(3):
        seg = out[:, block * N_BINS:(block + 1) * N_BINS]
        sums = seg.sum(axis=1, keepdims=True)
        np.divide(seg, sums, out=seg, where=sums > 0)
        seg *= 100.0
    return out


def fpfh_rows(cloud: PointCloud, keypoints: np.ndarray, radius: float,
              index: Optional[NeighborIndex] = None,
              ) -> Tuple[np.ndarray, np.ndarray]:
    """FPFH at the given keypoint indices.

    Returns (kept_keypoints, rows); keypoints with fewer than 5 usable
    neighbors are dropped with a warning.
    """
    index = index or NeighborIndex(cloud.positions)
    pos, nrm = cloud.positions, cloud.normals
    valid = cloud.valid_normal_mask()
    keypoints = np.asarray(keypoints, dtype=np.int64)

    kp_nbrs = _neighbor_lists(index, pos, keypoints, radius, valid)
    kept, kept_nbrs = [], []
    for kp, nbr in zip(keypoints, kp_nbrs):
        if len(nbr) < MIN_NEIGHBORS:
            warnings.warn(f"keypoint {kp}: fewer than {MIN_NEIGHBORS} "
                          "neighbors, descriptor skipped")
            continue
        kept.append(kp)
        kept_nbrs.append(nbr)
    if not kept:
        return np.empty(0, dtype=np.int64), np.empty((0, FPFH_DIM))

    needed = np.unique(np.concatenate([np.asarray(kept)] + kept_nbrs))
    spfh_of = _spfh_table(pos, nrm, index, radius, needed, valid)

    rows = np.zeros((len(kept), FPFH_DIM))
    for r, (kp, nbr) in enumerate(zip(kept, kept_nbrs)):
        dist = np.linalg.norm(pos[nbr] - pos[kp], axis=1)
        weighted = (spfh_of[nbr] / dist[:, None]).sum(axis=0) / len(nbr)
        rows[r] = spfh_of[kp] + weighted
    return np.asarray(kept, dtype=np.int64), _normalize_blocks(rows)


def _spfh_table(pos, nrm, index, radius, needed, valid) -> np.ndarray:
    """SPFH rows for `needed` indices, addressable by original index."""
    table = np.zeros((len(pos), FPFH_DIM))
    nbr_lists = _neighbor_lists(index, pos, needed, radius, valid)
    for i, nbr in zip(needed, nbr_lists):
        table[i] = spfh(pos, nrm, i, nbr)
    return table


def fpfh_dense(cloud: PointCloud, radius: float,
               index: Optional[NeighborIndex] = None) -> np.ndarray:
    """FPFH for every point; rows that cannot be computed are zero.

    Used where a histogram is needed per element rather than per keypoint
    (supervoxel features); under-supported points degrade to a zero row
    instead of being dropped so output stays aligned with the input.
    """
    index = index or NeighborIndex(cloud.positions)
    pos, nrm = cloud.positions, cloud.normals
    valid = cloud.valid_normal_mask()
    everything = np.arange(len(pos))
    nbr_lists = _neighbor_lists(index, pos, everything, radius, valid)

    table = np.zeros((len(pos), FPFH_DIM))
    for i, nbr in enumerate(nbr_lists):
        if valid[i]:
            table[i] = spfh(pos, nrm, i, nbr)

    rows = np.zeros((len(pos), FPFH_DIM))
    for i, nbr in enumerate(nbr_lists):
        if not valid[i] or len(nbr) < MIN_NEIGHBORS:
            continue
        dist = np.linalg.norm(pos[nbr] - pos[i], axis=1)
        weighted = (table[nbr] / dist[:, None]).sum(axis=0) / len(nbr)
        rows[i] = table[i] + weighted
    return _normalize_blocks(rows)

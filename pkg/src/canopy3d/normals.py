"""Surface normal estimation by local covariance analysis.

The normal at a point is the smallest-eigenvalue eigenvector of the
covariance of its radius neighborhood, oriented toward a fixed synthetic
viewpoint above the cloud centroid.  Points with too few neighbors, or
whose neighborhood is collinear, get a NaN normal and are excluded from
descriptor keypoints downstream.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .cloud import PointCloud
from .neighbors import NeighborIndex

DEFAULT_VIEWPOINT_LIFT = 10.0   # meters above the centroid

# A neighborhood whose two largest covariance eigenvalues differ by more
# than this ratio is effectively a line; its normal is undefined.
_COLLINEAR_RATIO = 1e-8


def estimate_normals(cloud: PointCloud, radius: float,
                     viewpoint: Optional[np.ndarray] = None) -> PointCloud:
    """Return a copy of `cloud` with per-point unit normals.

    Each normal is signed so it points toward `viewpoint` (default: cloud
    centroid lifted by +10 m in z).  Invalid points carry NaN rows.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pos = cloud.positions
    if viewpoint is None:
        viewpoint = pos.mean(axis=0) + np.array([0.0, 0.0, DEFAULT_VIEWPOINT_LIFT])
    viewpoint = np.asarray(viewpoint, dtype=np.float64)

    index = NeighborIndex(pos)
    neighborhoods = index._tree.query_ball_point(pos, radius)

    normals = np.full_like(pos, np.nan)
    for i, nbrs in enumerate(neighborhoods):
        if len(nbrs) < 3:
            continue
        pts = pos[nbrs]
        centered = pts - pts.mean(axis=0)
        cov = centered.T @ centered
        evals, evecs = np.linalg.eigh(cov)
        if evals[2] <= 0 or evals[1] / evals[2] < _COLLINEAR_RATIO:
            continue
        n = evecs[:, 0]
        if np.dot(n, viewpoint - pos[i]) < 0:
            n = -n
        normals[i] = n
    return PointCloud(cloud.positions, cloud.colors, normals)

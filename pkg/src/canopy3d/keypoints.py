"""Keypoint detection: uniform spatial sampling and an ISS-style detector.

Keypoints are represented as an index array into the cloud; only points
with a valid normal qualify, since every descriptor downstream needs one.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .cloud import PointCloud, voxel_downsample
from .errors import PipelineError
from .neighbors import NeighborIndex

DEFAULT_SPACING_FACTOR = 4.0
ISS_GAMMA_21 = 0.975
ISS_GAMMA_32 = 0.975
ISS_SALIENT_FACTOR = 6.0
ISS_NMS_FACTOR = 4.0
_MIN_NEIGHBORS = 5


def detect_keypoints(cloud: PointCloud, method: str = "uniform",
                     spacing: Optional[float] = None,
                     resolution: Optional[float] = None,
                     index: Optional[NeighborIndex] = None) -> np.ndarray:
    """Return sorted indices of detected keypoints.

    uniform: voxel centers at `spacing` snapped to the nearest cloud point.
    iss: eigenvalue-ratio saliency with non-maximum suppression; needs
    `resolution` to size its radii.
    """
    if not cloud.has_normals:
        raise PipelineError("keypoint detection requires normals")
    index = index or NeighborIndex(cloud.positions)
    if method == "uniform":
        if spacing is None:
            if resolution is None:
                raise PipelineError("uniform keypoints need spacing or resolution")
            spacing = DEFAULT_SPACING_FACTOR * resolution
        picked = _uniform(cloud, index, spacing)
    elif method == "iss":
        if resolution is None:
            raise PipelineError("iss keypoints need a resolution estimate")
        picked = _iss(cloud, index, resolution)
    else:
        raise PipelineError(f"unknown keypoint method: {method!r}")

    valid = cloud.valid_normal_mask()
    picked = picked[valid[picked]]
    if picked.size == 0:
        raise PipelineError("no keypoints detected")
    return np.sort(picked)


def _uniform(cloud: PointCloud, index: NeighborIndex, spacing: float) -> np.ndarray:
    centers = voxel_downsample(cloud, spacing).positions
    snapped, _ = index.knn(centers, k=1)
    return np.unique(snapped[:, 0])


def _iss(cloud: PointCloud, index: NeighborIndex, resolution: float) -> np.ndarray:
    salient_r = ISS_SALIENT_FACTOR * resolution
    nms_r = ISS_NMS_FACTOR * resolution
    pos = cloud.positions
    n = len(pos)
    saliency = np.full(n, -1.0)

    neighborhoods = index._tree.query_ball_point(pos, salient_r)
    for i in range(n):
        nbr = np.asarray(neighborhoods[i])
        nbr = nbr[nbr != i]
        if len(nbr) < _MIN_NEIGHBORS:
            continue
        rel = pos[nbr] - pos[i]
        cov = rel.T @ rel / len(nbr)
        evals = np.linalg.eigvalsh(cov)    # ascending: l3, l2, l1
        l3, l2, l1 = evals
        if l1 <= 0:
            continue
        if l2 / l1 < ISS_GAMMA_21 and l3 / l2 < ISS_GAMMA_32 \
                and l3 > 1e-9 * l1:
            saliency[i] = l3

    candidates = np.nonzero(saliency >= 0)[0]
    keep = []
    for i in candidates:
        nbr = np.asarray(index._tree.query_ball_point(pos[i], nms_r))
        others = nbr[nbr != i]
        s = saliency[others]
        if np.all(saliency[i] > s) or \
                (np.all(saliency[i] >= s) and np.all(others[s == saliency[i]] > i)):
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)

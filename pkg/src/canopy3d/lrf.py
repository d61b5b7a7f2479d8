"""Local reference frames for rotation-invariant descriptors.

The frame is built from the eigenvectors of a distance-weighted covariance
of the support points, with axis signs fixed by majority vote over the
support, so that a rigid motion of the cloud rotates the frame with it.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

# support is considered line-like (frame ambiguous) below this ratio
DEGENERATE_RATIO = 1e-6


def compute_lrf(support: np.ndarray, center: np.ndarray,
                radius: float) -> Optional[np.ndarray]:
    """Return a (3, 3) row matrix [x, y, z] or None for degenerate supports.

    support: (k, 3) positions within `radius` of `center` (center itself may
    be included; it contributes nothing to the covariance).
    """
    rel = support - center
    dists = np.linalg.norm(rel, axis=1)
    weights = radius - dists
    weights[weights < 0] = 0.0
    total = weights.sum()
    if total <= 0:
        return None
    cov = (rel * weights[:, None]).T @ rel / total
    evals, evecs = np.linalg.eigh(cov)     # ascending
    largest, smallest = evals[2], evals[0]
    if largest <= 0 or evals[1] / largest < DEGENERATE_RATIO:
        return None

    x = evecs[:, 2]
    z = evecs[:, 0]
    # majority vote: each axis points toward the heavier half of the support
    if np.count_nonzero(rel @ x >= 0) < np.count_nonzero(rel @ x < 0):
        x = -x
    if np.count_nonzero(rel @ z >= 0) < np.count_nonzero(rel @ z < 0):
        z = -z
    y = np.cross(z, x)
    return np.vstack([x, y, z])

"""Exact spatial neighbor queries over point positions.

Thin wrapper around scipy's kd-tree.  Results are exact (no approximation)
and always sorted by ascending distance, which keeps descriptor outputs
reproducible across runs.  The index is immutable and safe to share across
parallel workers.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


class NeighborIndex:
    """k-nearest and radius queries over a fixed set of 3D points."""

    def __init__(self, positions: np.ndarray):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (N, 3)")
        self._tree = cKDTree(self.positions)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def knn(self, queries: np.ndarray, k: int):
        """Indices and distances of the k nearest points, ascending by distance.

        A query point that is itself a member is returned at distance 0.
        Works on a single (3,) query or a batch (M, 3).
        """
        queries = np.asarray(queries, dtype=np.float64)
        single = queries.ndim == 1
        k = min(k, len(self))
        dists, idx = self._tree.query(np.atleast_2d(queries), k=k)
        dists = np.atleast_2d(dists).reshape(-1, k)
        idx = np.atleast_2d(idx).reshape(-1, k)
        if single:
            return idx[0], dists[0]
        return idx, dists

    def radius(self, query: np.ndarray, r: float):
        """Indices and distances of all points within distance r of `query`,
        sorted ascending."""
        query = np.asarray(query, dtype=np.float64)
        idx = np.asarray(self._tree.query_ball_point(query, r), dtype=np.int64)
        if idx.size == 0:
            return idx, np.empty(0)
        dists = np.linalg.norm(self.positions[idx] - query, axis=1)
        order = np.argsort(dists, kind="stable")
        return idx[order], dists[order]

    def radius_counts(self, queries: np.ndarray, r: float) -> np.ndarray:
        """Number of points within distance r of each query row."""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        return np.array([len(m) for m in self._tree.query_ball_point(queries, r)])

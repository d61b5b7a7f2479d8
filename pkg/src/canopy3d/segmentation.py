"""Supervoxel segmentation over a voxel adjacency graph, plus canopy masking.

The cloud is quantized into a voxel grid with 26-connectivity; seeds picked
on a regular lattice grow breadth-first, each frontier voxel joining the
seed whose 39-dim feature [xyz, rgb, FPFH] it matches best.  Supervoxels
are then labeled plant or background by the excess-green index of their
centroid color.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cloud import PointCloud
from .errors import EmptySeedSetError, NoCanopyError
from .fpfh import fpfh_dense
from .neighbors import NeighborIndex
from .normals import estimate_normals

FEATURE_DIM = 39
DEFAULT_WEIGHTS = (0.2, 0.4, 1.0)      # color, spatial, feature
DEFAULT_MIN_OCCUPIED = 3
DEFAULT_EXG_THRESHOLD = 0.1
_VOXEL_FPFH_FACTOR = 3.0               # feature support in voxel units

_OFFSETS = np.array([(dx, dy, dz)
                     for dx in (-1, 0, 1)
                     for dy in (-1, 0, 1)
                     for dz in (-1, 0, 1)
                     if (dx, dy, dz) != (0, 0, 0)], dtype=np.int64)


@dataclass(frozen=True)
class VoxelGrid:
    r_voxel: float
    cells: np.ndarray             # (V, 3) integer cell indices
    cell_of_point: np.ndarray     # (N,) voxel index per point
    members: Tuple[np.ndarray, ...]
    centroids: np.ndarray         # (V, 3) mean member position
    colors: np.ndarray            # (V, 3) mean member color
    adjacency: Tuple[np.ndarray, ...]   # 26-neighbor voxel indices

    def __len__(self):
        return len(self.cells)


@dataclass(frozen=True)
class SeedSet:
    voxels: np.ndarray            # voxel indices acting as seeds
    r_seed: float

    def __len__(self):
        return len(self.voxels)


@dataclass(frozen=True)
class Supervoxel:
    id: int
    voxels: np.ndarray
    feature: np.ndarray           # (39,) mean member feature

    def __post_init__(self):
        if self.feature.shape != (FEATURE_DIM,):
            raise ValueError(f"supervoxel feature must be {FEATURE_DIM}-dim")


@dataclass(frozen=True)
class Segmentation:
    grid: VoxelGrid
    supervoxels: Tuple[Supervoxel, ...]
    voxel_assignment: np.ndarray   # (V,) supervoxel id or -1
    point_assignment: np.ndarray   # (N,) supervoxel id or -1
    unassigned_voxels: np.ndarray


@dataclass(frozen=True)
class CanopyResult:
    plant_mask: np.ndarray         # (S,) bool per supervoxel
    point_flags: np.ndarray        # (N,) bool
    canopy_indices: np.ndarray
    canopy: PointCloud


def exg(colors: np.ndarray) -> np.ndarray:
    """Excess-green index 2g - r - b."""
    colors = np.atleast_2d(colors)
    return 2.0 * colors[:, 1] - colors[:, 0] - colors[:, 2]


def voxelize(cloud: PointCloud, r_voxel: float) -> VoxelGrid:
    if r_voxel <= 0:
        raise ValueError("r_voxel must be positive")
    cells_per_point = np.floor(cloud.positions / r_voxel).astype(np.int64)
    order: Dict[tuple, int] = {}
    cell_of_point = np.empty(len(cloud), dtype=np.int64)
    for i, key in enumerate(map(tuple, cells_per_point)):
        cell_of_point[i] = order.setdefault(key, len(order))

    n_vox = len(order)
    members: List[List[int]] = [[] for _ in range(n_vox)]
    for i, v in enumerate(cell_of_point):
        members[v].append(i)
    member_arrays = tuple(np.asarray(m, dtype=np.int64) for m in members)

    cells = np.array(list(order.keys()), dtype=np.int64)
    centroids = np.empty((n_vox, 3))
    colors = np.empty((n_vox, 3))
    for v, m in enumerate(member_arrays):
        centroids[v] = cloud.positions[m].mean(axis=0)
        colors[v] = cloud.colors[m].mean(axis=0)

    adjacency = []
    for v in range(n_vox):
        nbrs = [order[key] for key in map(tuple, cells[v] + _OFFSETS)
                if key in order]
        adjacency.append(np.asarray(sorted(nbrs), dtype=np.int64))
    return VoxelGrid(r_voxel, cells, cell_of_point, member_arrays,
                     centroids, colors, tuple(adjacency))


def select_seeds(grid: VoxelGrid, r_seed: float) -> SeedSet:
    """Seeds on an origin-anchored lattice, snapped to occupied voxels.

    Lattice points without an occupied voxel within r_seed/2 are dropped;
    remaining snaps are deduplicated.
    """
    if r_seed <= grid.r_voxel:
        raise ValueError("r_seed must exceed r_voxel")
    lo = np.floor((grid.centroids.min(axis=0) - r_seed / 2) / r_seed).astype(int)
    hi = np.floor((grid.centroids.max(axis=0) + r_seed / 2) / r_seed).astype(int)
    axes = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
    lattice = (np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
               .reshape(-1, 3) * r_seed)

    index = NeighborIndex(grid.centroids)
    idx, dists = index.knn(lattice, k=1)
    hits = idx[dists[:, 0] <= r_seed / 2, 0]
    if hits.size == 0:
        raise EmptySeedSetError("no occupied voxel near any seed lattice point")
    return SeedSet(np.unique(hits), r_seed)


def filter_isolated_seeds(grid: VoxelGrid, seeds: SeedSet,
                          min_occupied: int = DEFAULT_MIN_OCCUPIED) -> SeedSet:
    """Drop seeds with fewer than min_occupied voxels within r_seed/2."""
    if min_occupied < 1:
        raise ValueError("min_occupied must be >= 1")
    index = NeighborIndex(grid.centroids)
    counts = index.radius_counts(grid.centroids[seeds.voxels], seeds.r_seed / 2)
    kept = seeds.voxels[counts >= min_occupied]
    if kept.size == 0:
        raise EmptySeedSetError("all seeds filtered as isolated")
    return SeedSet(kept, seeds.r_seed)


def compute_voxel_features(grid: VoxelGrid,
                           with_fpfh: bool = True) -> np.ndarray:
    """39-dim voxel features [centroid xyz, mean rgb, FPFH of the centroid
    cloud]; FPFH rows degrade to zero where the neighborhood is too thin."""
    features = np.zeros((len(grid), FEATURE_DIM))
    features[:, 0:3] = grid.centroids
    features[:, 3:6] = grid.colors
    if with_fpfh and len(grid) >= 2:
        centroid_cloud = PointCloud(grid.centroids,
                                    np.clip(grid.colors, 0.0, 1.0))
        radius = _VOXEL_FPFH_FACTOR * grid.r_voxel
        with_normals = estimate_normals(centroid_cloud, radius)
        features[:, 6:39] = fpfh_dense(with_normals, radius)
    return features


def expand_supervoxels(grid: VoxelGrid, seeds: SeedSet,
                       weights: Sequence[float] = DEFAULT_WEIGHTS,
                       features: Optional[np.ndarray] = None) -> Segmentation:
    """Level-synchronous breadth-first growth from all seeds at once.

    A frontier voxel joins the supervoxel minimizing
    D = sqrt(w_c D_c^2 + w_s D_s^2 / (3 r_seed)^2 + w_f D_f^2) against the
    seed's fixed feature; ties break toward the lowest supervoxel id.
    """
    w_color, w_spatial, w_feature = (float(w) for w in weights)
    if min(w_color, w_spatial, w_feature) < 0 or \
            w_color + w_spatial + w_feature == 0:
        raise ValueError("weights must be non-negative and not all zero")
    if len(seeds) == 0:
        raise EmptySeedSetError("expansion requires at least one seed")
    if features is None:
        features = compute_voxel_features(grid, with_fpfh=w_feature > 0)

    spatial_norm = (3.0 * seeds.r_seed) ** 2
    seed_feats = features[seeds.voxels]
    assignment = np.full(len(grid), -1, dtype=np.int64)
    assignment[seeds.voxels] = np.arange(len(seeds))
    frontiers = [[int(v)] for v in seeds.voxels]

    while True:
        proposals: Dict[int, Tuple[float, int]] = {}
        for sv in range(len(seeds)):
            sf = seed_feats[sv]
            for v in frontiers[sv]:
                for u in grid.adjacency[v]:
                    if assignment[u] != -1:
                        continue
                    f = features[u]
                    dc2 = float(((f[3:6] - sf[3:6]) ** 2).sum())
                    ds2 = float(((f[0:3] - sf[0:3]) ** 2).sum())
                    df2 = float(((f[6:39] - sf[6:39]) ** 2).sum())
                    d = np.sqrt(w_color * dc2 + w_spatial * ds2 / spatial_norm
                                + w_feature * df2)
                    best = proposals.get(int(u))
                    if best is None or d < best[0]:
                        proposals[int(u)] = (d, sv)
        if not proposals:
            break
        frontiers = [[] for _ in range(len(seeds))]
        for u, (_, sv) in proposals.items():
            assignment[u] = sv
            frontiers[sv].append(u)
        for f in frontiers:
            f.sort()

    unassigned = np.nonzero(assignment == -1)[0]
    if unassigned.size:
        warnings.warn(f"{unassigned.size} voxels unreachable from any seed "
                      "left unassigned")

    supervoxels = []
    for sv in range(len(seeds)):
        member_voxels = np.nonzero(assignment == sv)[0]
        supervoxels.append(Supervoxel(sv, member_voxels,
                                      features[member_voxels].mean(axis=0)))
    point_assignment = assignment[grid.cell_of_point]
    return Segmentation(grid, tuple(supervoxels), assignment,
                        point_assignment, unassigned)


def segment_canopy(cloud: PointCloud, seg: Segmentation,
                   threshold: float = DEFAULT_EXG_THRESHOLD) -> CanopyResult:
    """Label supervoxels plant iff centroid ExG exceeds the threshold."""
    if not seg.supervoxels:
        raise NoCanopyError("no supervoxels to segment")
    centroid_colors = np.array([sv.feature[3:6] for sv in seg.supervoxels])
    plant_mask = exg(centroid_colors) > threshold
    if not plant_mask.any():
        raise NoCanopyError("no canopy found")
    assigned = seg.point_assignment >= 0
    point_flags = np.zeros(len(cloud), dtype=bool)
    point_flags[assigned] = plant_mask[seg.point_assignment[assigned]]
    canopy_indices = np.nonzero(point_flags)[0]
    return CanopyResult(plant_mask, point_flags, canopy_indices,
                        cloud.select(canopy_indices))


def run_vccs(cloud: PointCloud, r_voxel: float, r_seed: float,
             weights: Sequence[float] = DEFAULT_WEIGHTS,
             min_occupied: int = DEFAULT_MIN_OCCUPIED) -> Segmentation:
    """voxelize → seed → filter → expand, with the standard defaults."""
    grid = voxelize(cloud, r_voxel)
    seeds = filter_isolated_seeds(grid, select_seeds(grid, r_seed),
                                  min_occupied)
    return expand_supervoxels(grid, seeds, weights)


def save_segmentation(seg: Segmentation, canopy: CanopyResult, path) -> None:
    """One line per point: `point_index supervoxel_id plant_flag`."""
    with open(path, "w") as fh:
        for i, (sv, flag) in enumerate(zip(seg.point_assignment,
                                           canopy.point_flags)):
            fh.write(f"{i} {sv} {int(flag)}\n")


def load_segmentation(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read back (point_assignment, plant_flags)."""
    assignment, flags = [], []
    with open(path) as fh:
        for line in fh:
            _, sv, flag = line.split()
            assignment.append(int(sv))
            flags.append(flag == "1")
    return np.asarray(assignment, dtype=np.int64), np.asarray(flags, dtype=bool)

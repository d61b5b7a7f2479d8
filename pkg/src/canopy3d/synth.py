"""Procedural generator of labeled wheat-like plant point clouds.

Plants are built from parametric ribbon leaves on a short stem over a pot
and ground plane.  A severity knob in [0, 1] drives three drought
phenotypes: extra droop of the leaf spine, adaxial rolling of the leaf
cross-section, and a green-to-yellow chlorosis shift.  Every point carries
a ground-truth label (leaf id, or -1 for background), which gives the
desk-scale benchmarks an exact reference that field data cannot.

Generation is a pure function of (params, severity, seed): the random draw
sequence never depends on severity, so clouds at different severities but
the same seed differ only through the phenotype mapping.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .cloud import PLY_FORMAT, PointCloud, save_cloud

BACKGROUND_LABEL = -1
CONTROL = "control"
DROUGHT = "drought"

# Severity-to-phenotype mapping: at s=1 the spine droops an extra 60 deg,
# the cross-section curls to a full half-cylinder, and leaf color moves
# 60% of the way from green to yellow.
DROOP_GAIN = np.pi / 3.0
ROLL_GAIN = np.pi / 2.0
CHLOROSIS_GAIN = 0.6

_YELLOW = np.array([0.66, 0.62, 0.10])
_POT_COLOR = np.array([0.46, 0.28, 0.16])
_SOIL_COLOR = np.array([0.31, 0.22, 0.13])
_GROUND_COLOR = np.array([0.42, 0.30, 0.17])
_STEM_COLOR = np.array([0.25, 0.48, 0.18])


@dataclass(frozen=True)
class PlantParams:
    """Geometry, sampling, and color profile of one synthetic plant."""

    leaf_count: int = 8
    leaf_length: float = 0.27          # m
    leaf_width: float = 0.013          # m
    curvature: float = 1.2             # 1/m, baseline spine bend without stress
    tiller_spread: float = 0.85        # rad, spread of leaf elevation angles
    points_per_leaf: int = 1100
    ground_extent: float = 0.42        # m, side of the square ground plane
    ground_points: int = 5200
    pot_radius: float = 0.05
    pot_height: float = 0.06
    pot_points: int = 700
    stem_points: int = 220
    base_color: Tuple[float, float, float] = (0.20, 0.55, 0.18)
    color_noise: float = 0.03
    position_noise: float = 0.0007     # m
    seed: int = 0

    def __post_init__(self):
        if self.leaf_count < 1 or self.points_per_leaf < 1:
            raise ValueError("counts must be >= 1")
        if min(self.leaf_length, self.leaf_width, self.ground_extent,
               self.pot_radius, self.pot_height) <= 0:
            raise ValueError("dimensions must be positive")


@dataclass(frozen=True)
class LabeledCloud:
    """Point cloud plus per-point ground truth and a class label."""

    cloud: PointCloud
    point_labels: np.ndarray      # (N,) int: leaf id >= 0, or -1 background
    class_label: str              # CONTROL or DROUGHT
    severity: float

    def __post_init__(self):
        labels = np.asarray(self.point_labels, dtype=np.int64)
        if labels.shape != (len(self.cloud),):
            raise ValueError("every point must carry a label")
        labels.flags.writeable = False
        object.__setattr__(self, "point_labels", labels)

    def leaf_mask(self) -> np.ndarray:
        return self.point_labels >= 0


def class_for_severity(s: float) -> str:
    """Drought from severity 0.5 upward, control below."""
    return DROUGHT if s >= 0.5 else CONTROL


def _bezier(p0, p1, p2, p3, u):
    u = u[:, None]
    w = 1.0 - u
    return (w ** 3 * p0 + 3 * w ** 2 * u * p1 + 3 * w * u ** 2 * p2 + u ** 3 * p3)


def _bezier_tangent(p0, p1, p2, p3, u):
    u = u[:, None]
    w = 1.0 - u
    return 3 * w ** 2 * (p1 - p0) + 6 * w * u * (p2 - p1) + 3 * u ** 2 * (p3 - p2)


def generate_plant(params: PlantParams, severity: float,
                   seed: Optional[int] = None) -> LabeledCloud:
    """Sample one plant scene at the given drought severity.

    Deterministic per seed (defaults to params.seed).  Larger severity
    strictly lowers the leaves and shifts their color toward yellow by
    construction.
    """
    if not 0.0 <= severity <= 1.0:
        raise ValueError("severity must lie in [0, 1]")
    rng = np.random.default_rng(params.seed if seed is None else seed)

    droop_extra = severity * DROOP_GAIN
    roll_half_angle = severity * ROLL_GAIN
    chlorosis = severity * CHLOROSIS_GAIN
    base_green = np.asarray(params.base_color)

    stem_top = params.pot_height + 0.035
    positions, colors, labels = [], [], []

    for leaf in range(params.leaf_count):
        azimuth = 2 * np.pi * leaf / params.leaf_count + rng.uniform(-0.25, 0.25)
        elev0 = np.pi / 2 - params.tiller_spread * rng.uniform(0.45, 1.0)
        length = params.leaf_length * rng.uniform(0.85, 1.1)
        width = params.leaf_width * rng.uniform(0.85, 1.15)
        leaf_green = np.clip(base_green + rng.uniform(-0.04, 0.04, 3), 0.0, 1.0)
        u = rng.uniform(0.0, 1.0, params.points_per_leaf)
        v = rng.uniform(-1.0, 1.0, params.points_per_leaf)
        jitter = rng.normal(0.0, params.position_noise, (params.points_per_leaf, 3))
        color_jitter = rng.uniform(-params.color_noise, params.color_noise,
                                   (params.points_per_leaf, 3))

        # Spine: cubic Bezier between the base direction and the drooped tip
        # direction; total droop = baseline curvature bend + severity droop.
        droop = params.curvature * length * 0.5 + droop_extra
        elev1 = elev0 - droop
        dir_xy = np.array([np.cos(azimuth), np.sin(azimuth), 0.0])
        d0 = dir_xy * np.cos(elev0) + np.array([0, 0, np.sin(elev0)])
        d1 = dir_xy * np.cos(elev1) + np.array([0, 0, np.sin(elev1)])
        chord = d0 + d1
        chord = chord / np.linalg.norm(chord)
        p0 = np.array([0.0, 0.0, stem_top]) + 0.012 * dir_xy
        p3 = p0 + 0.92 * length * chord
        p1 = p0 + (length / 3.0) * d0
        p2 = p3 - (length / 3.0) * d1

        spine = _bezier(p0, p1, p2, p3, u)
        tangent = _bezier_tangent(p0, p1, p2, p3, u)
        tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
        lateral = np.array([-np.sin(azimuth), np.cos(azimuth), 0.0])
        up = np.cross(tangent, lateral)
        up /= np.linalg.norm(up, axis=1, keepdims=True)

        half_width = 0.5 * width * (1.0 - 0.85 * u ** 2)
        if roll_half_angle > 1e-6:
            rho = half_width / roll_half_angle
            arc = roll_half_angle * v
            offset = (lateral[None, :] * (rho * np.sin(arc))[:, None]
                      + up * (rho * (1.0 - np.cos(arc)))[:, None])
        else:
            offset = lateral[None, :] * (half_width * v)[:, None]

        positions.append(spine + offset + jitter)
        color = (1.0 - chlorosis) * leaf_green + chlorosis * _YELLOW
        colors.append(np.clip(color[None, :] + color_jitter, 0.0, 1.0))
        labels.append(np.full(params.points_per_leaf, leaf))

    # Stem: thin green cylinder bridging soil and leaf bases.
    n = params.stem_points
    theta = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(params.pot_height - 0.005, stem_top, n)
    r = 0.008
    stem = np.column_stack([r * np.cos(theta), r * np.sin(theta), z])
    stem += rng.normal(0.0, params.position_noise, (n, 3))
    positions.append(stem)
    colors.append(np.clip(_STEM_COLOR + rng.uniform(-0.03, 0.03, (n, 3)), 0, 1))
    labels.append(np.full(n, BACKGROUND_LABEL))

    # Pot shell plus soil disc at its rim.
    n = params.pot_points
    n_shell = int(0.7 * n)
    theta = rng.uniform(0, 2 * np.pi, n_shell)
    z = rng.uniform(0.0, params.pot_height, n_shell)
    shell = np.column_stack([params.pot_radius * np.cos(theta),
                             params.pot_radius * np.sin(theta), z])
    n_soil = n - n_shell
    theta = rng.uniform(0, 2 * np.pi, n_soil)
    rad = params.pot_radius * np.sqrt(rng.uniform(0, 1, n_soil))
    soil = np.column_stack([rad * np.cos(theta), rad * np.sin(theta),
                            np.full(n_soil, params.pot_height)])
    pot = np.vstack([shell, soil]) + rng.normal(0.0, params.position_noise, (n, 3))
    positions.append(pot)
    pot_col = np.vstack([np.tile(_POT_COLOR, (n_shell, 1)),
                         np.tile(_SOIL_COLOR, (n_soil, 1))])
    colors.append(np.clip(pot_col + rng.uniform(-0.03, 0.03, (n, 3)), 0, 1))
    labels.append(np.full(n, BACKGROUND_LABEL))

    # Ground plane.
    n = params.ground_points
    half = params.ground_extent / 2.0
    ground = np.column_stack([rng.uniform(-half, half, n),
                              rng.uniform(-half, half, n),
                              rng.normal(0.0, 0.0008, n)])
    positions.append(ground)
    colors.append(np.clip(_GROUND_COLOR + rng.uniform(-0.04, 0.04, (n, 3)), 0, 1))
    labels.append(np.full(n, BACKGROUND_LABEL))

    cloud = PointCloud(np.vstack(positions), np.vstack(colors))
    return LabeledCloud(cloud, np.concatenate(labels),
                        class_for_severity(severity), severity)


@dataclass(frozen=True)
class ManifestRow:
    plant_id: str
    class_label: str
    severity: float
    seed: int
    path: str = ""


def generate_dataset(n_control: int, n_drought: int,
                     severity_range: Tuple[float, float] = (0.5, 1.0),
                     base_seed: int = 0,
                     params: Optional[PlantParams] = None,
                     ) -> Tuple[List[LabeledCloud], List[ManifestRow]]:
    """Generate a labeled dataset with per-plant parameter jitter.

    Control severities are drawn from [0, 0.15], drought from
    `severity_range`.  All randomness derives from `base_seed`.
    """
    if n_control < 1 or n_drought < 1:
        raise ValueError("class counts must be >= 1")
    lo, hi = severity_range
    if not (0.5 <= lo <= hi <= 1.0):
        raise ValueError("drought severity range must lie within [0.5, 1.0]")
    base = params or PlantParams()

    meta = np.random.default_rng(base_seed)
    plant_seeds = np.random.SeedSequence(base_seed).generate_state(
        n_control + n_drought, dtype=np.uint64)

    clouds, manifest = [], []
    for i in range(n_control + n_drought):
        if i < n_control:
            severity = float(meta.uniform(0.0, 0.15))
        else:
            severity = float(meta.uniform(lo, hi))
        jittered = replace(
            base,
            leaf_count=max(3, base.leaf_count + int(meta.integers(-1, 2))),
            leaf_length=base.leaf_length * float(meta.uniform(0.9, 1.1)),
            leaf_width=base.leaf_width * float(meta.uniform(0.9, 1.1)),
        )
        seed = int(plant_seeds[i])
        labeled = generate_plant(jittered, severity, seed)
        clouds.append(labeled)
        manifest.append(ManifestRow(f"plant_{i:03d}", labeled.class_label,
                                    severity, seed))
    return clouds, manifest


def write_dataset(clouds: Sequence[LabeledCloud], manifest: Sequence[ManifestRow],
                  out_dir) -> List[ManifestRow]:
    """Write clouds as ASCII PLY with per-point label sidecars plus a manifest.

    Returns the manifest rows with their path fields filled in.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for labeled, row in zip(clouds, manifest):
        path = out_dir / f"{row.plant_id}.ply"
        save_cloud(labeled.cloud, path, PLY_FORMAT)
        sidecar = path.with_suffix(".labels")
        with open(sidecar, "w") as fh:
            fh.writelines(f"{val}\n" for val in labeled.point_labels)
        rows.append(replace(row, path=path.name))
    write_manifest(rows, out_dir / "manifest.csv")
    return rows


def write_manifest(rows: Sequence[ManifestRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["plant_id", "class", "severity", "seed", "path"])
        for row in rows:
            writer.writerow([row.plant_id, row.class_label,
                             repr(row.severity), row.seed, row.path])


def read_manifest(path) -> List[ManifestRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ManifestRow(rec["plant_id"], rec["class"],
                                    float(rec["severity"]), int(rec["seed"]),
                                    rec["path"]))
    return rows


def read_labels(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=np.int64)


# ---------------------------------------------------------------------------
# Rigid shapes for network pre-training

SHAPE_CLASSES = ("sphere", "box", "cylinder")


def generate_shape_dataset(n_per_class: int, n_points: int = 2000,
                           seed: int = 0) -> Tuple[List[PointCloud], np.ndarray]:
    """Colored rigid-shape clouds (sphere / box / cylinder surfaces).

    Stands in for an external pre-training corpus; colors are random per
    shape and carry no class signal.
    """
    rng = np.random.default_rng(seed)
    clouds, labels = [], []
    for cls, name in enumerate(SHAPE_CLASSES):
        for _ in range(n_per_class):
            size = rng.uniform(0.08, 0.2)
            if name == "sphere":
                raw = rng.normal(size=(n_points, 3))
                raw /= np.linalg.norm(raw, axis=1, keepdims=True)
                pts = raw * size
            elif name == "box":
                extents = size * rng.uniform(0.4, 1.0, 3)
                face = rng.integers(0, 6, n_points)
                pts = rng.uniform(-1, 1, (n_points, 3))
                axis = face // 2
                pts[np.arange(n_points), axis] = np.where(face % 2 == 0, -1.0, 1.0)
                pts = pts * extents
            else:
                radius = size * rng.uniform(0.3, 0.7)
                height = size * rng.uniform(1.0, 2.0)
                theta = rng.uniform(0, 2 * np.pi, n_points)
                pts = np.column_stack([radius * np.cos(theta),
                                       radius * np.sin(theta),
                                       rng.uniform(-height / 2, height / 2, n_points)])
            pts = pts + rng.normal(0.0, 0.001, pts.shape)
            color = rng.uniform(0.1, 0.9, 3)
            cols = np.clip(color + rng.uniform(-0.05, 0.05, (n_points, 3)), 0, 1)
            clouds.append(PointCloud(pts, cols))
            labels.append(cls)
    return clouds, np.array(labels, dtype=np.int64)

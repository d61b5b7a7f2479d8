"""Descriptor tests against independent brute-force oracles."""

import math

import numpy as np
import pytest

from canopy3d.cloud import PointCloud, make_cloud
from canopy3d.descriptors import (DescriptorSet, compute_descriptors,
                                  load_descriptors, save_descriptors)
from canopy3d.errors import PipelineError
from canopy3d.fpfh import fpfh_rows
from canopy3d.keypoints import detect_keypoints
from canopy3d.lrf import compute_lrf
from canopy3d.normals import estimate_normals
from canopy3d.rops import rops_descriptor, rops_rows
from canopy3d.shot import shot_rows

from conftest import random_rotation


# ---------------------------------------------------------------------------
# oracles: plain-loop reimplementations used only by the tests

def oracle_spfh(pos, nrm, i, nbrs):
    hist = np.zeros(33)
    for q in nbrs:
        d = pos[q] - pos[i]
        dist = math.sqrt(float(d @ d))
        if dist == 0:
            continue
        dhat = d / dist
        u = nrm[i]
        c = np.cross(dhat, u)
        cn = np.linalg.norm(c)
        if cn < 1e-12:
            continue
        v = c / cn
        w = np.cross(u, v)
        alpha = float(v @ nrm[q])
        phi = float(dhat @ u)
        theta = math.atan2(float(w @ nrm[q]), float(u @ nrm[q]))
        for off, val, lo, hi in ((0, alpha, -1, 1), (11, phi, -1, 1),
                                 (22, theta, -math.pi, math.pi)):
            b = int((val - lo) / (hi - lo) * 11)
            hist[off + min(max(b, 0), 10)] += 1
    return hist


def oracle_neighbors(pos, valid, i, radius):
    out = []
    for q in range(len(pos)):
        if q == i or not valid[q]:
            continue
        if np.linalg.norm(pos[q] - pos[i]) <= radius:
            out.append(q)
    return out


def oracle_fpfh(pos, nrm, valid, kp, radius):
    nbrs = oracle_neighbors(pos, valid, kp, radius)
    f = oracle_spfh(pos, nrm, kp, nbrs).astype(float)
    acc = np.zeros(33)
    for q in nbrs:
        dist = np.linalg.norm(pos[q] - pos[kp])
        acc += oracle_spfh(pos, nrm, q,
                           oracle_neighbors(pos, valid, q, radius)) / dist
    f = f + acc / len(nbrs)
    for block in range(3):
        seg = f[block * 11:(block + 1) * 11]
        s = seg.sum()
        if s > 0:
            f[block * 11:(block + 1) * 11] = seg / s * 100.0
    return f


def oracle_rops(local, radius, rotations=3, bins=5):
    def rot(axis, ang):
        c, s = math.cos(ang), math.sin(ang)
        m = np.eye(3)
        a, b = [(1, 2), (0, 2), (0, 1)][axis]
        m[a, a] = c
        m[b, b] = c
        m[a, b] = -s if axis != 1 else s
        m[b, a] = s if axis != 1 else -s
        return m

    out = []
    for axis in range(3):
        for t in range(rotations):
            pts = local @ rot(axis, 2 * math.pi * t / rotations).T
            for a, b in ((0, 1), (1, 2), (0, 2)):
                dist = np.zeros((bins, bins))
                for p in pts:
                    bi = min(max(int((p[a] + radius) / (2 * radius) * bins), 0),
                             bins - 1)
                    bj = min(max(int((p[b] + radius) / (2 * radius) * bins), 0),
                             bins - 1)
                    dist[bi, bj] += 1
                dist /= dist.sum()
                ib = sum(i * dist[i, j] for i in range(bins) for j in range(bins))
                jb = sum(j * dist[i, j] for i in range(bins) for j in range(bins))
                stats = []
                for m, n in ((1, 1), (1, 2), (2, 1), (2, 2)):
                    stats.append(sum((i - ib) ** m * (j - jb) ** n * dist[i, j]
                                     for i in range(bins) for j in range(bins)))
                ent = -sum(dist[i, j] * math.log(dist[i, j])
                           for i in range(bins) for j in range(bins)
                           if dist[i, j] > 0)
                out.extend(stats + [ent])
    return np.array(out)


def random_patch(rng, n=120, scale=0.05):
    pos = rng.uniform(-scale, scale, (n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pos, np.full((n, 3), 0.5), nrm)


# ---------------------------------------------------------------------------

class TestFpfh:
    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        for trial in range(20):
            n = int(rng.integers(30, 200))
            cloud = random_patch(rng, n=n)
            radius = float(rng.uniform(0.03, 0.08))
            kp = np.array([int(rng.integers(0, n))])
            kept, rows = fpfh_rows(cloud, kp, radius)
            if len(kept) == 0:
                continue
            ref = oracle_fpfh(cloud.positions, cloud.normals,
                              cloud.valid_normal_mask(), kp[0], radius)
            assert np.abs(rows[0] - ref).max() < 1e-6

    def test_coplanar_identical_normals_center_bins(self):
        rng = np.random.default_rng(0)
        pos = np.column_stack([rng.uniform(0, 0.1, 60),
                               rng.uniform(0, 0.1, 60), np.zeros(60)])
        nrm = np.tile([0.0, 0.0, 1.0], (60, 1))
        cloud = PointCloud(pos, np.full((60, 3), 0.5), nrm)
        kept, rows = fpfh_rows(cloud, np.array([0]), radius=0.2)
        row = rows[0]
        for block in range(3):
            assert row[block * 11 + 5] == pytest.approx(100.0)
            assert row[block * 11:(block + 1) * 11].sum() == pytest.approx(100.0)

    def test_block_sums_100(self):
        rng = np.random.default_rng(7)
        cloud = random_patch(rng)
        kept, rows = fpfh_rows(cloud, np.arange(10), radius=0.06)
        for row in rows:
            for block in range(3):
                assert row[block * 11:(block + 1) * 11].sum() == \
                    pytest.approx(100.0, abs=1e-6)
            assert np.all(row >= 0)

    def test_rotation_invariant(self):
        rng = np.random.default_rng(3)
        cloud = random_patch(rng)
        kp = np.arange(8)
        _, base = fpfh_rows(cloud, kp, radius=0.06)
        rot = random_rotation(rng)
        moved = cloud.transformed(rot, np.array([0.3, -0.2, 0.9]))
        _, turned = fpfh_rows(moved, kp, radius=0.06)
        assert np.abs(base - turned).max() < 1e-5

    def test_sparse_keypoint_skipped_with_warning(self):
        pos = np.vstack([np.zeros((1, 3)), np.eye(3) * 5.0])
        nrm = np.tile([0.0, 0.0, 1.0], (4, 1))
        cloud = PointCloud(pos, np.full((4, 3), 0.5), nrm)
        with pytest.warns(UserWarning, match="skipped"):
            kept, rows = fpfh_rows(cloud, np.array([0]), radius=0.1)
        assert len(kept) == 0


class TestShot:
    def test_dimension_and_unit_norm(self):
        rng = np.random.default_rng(11)
        cloud = random_patch(rng)
        kept, rows, frames = shot_rows(cloud, np.arange(12), radius=0.06)
        assert rows.shape[1] == 352
        assert len(rows) > 0
        for row in rows:
            assert np.linalg.norm(row) == pytest.approx(1.0, abs=1e-6)
        for frame in frames:
            assert np.allclose(frame @ frame.T, np.eye(3), atol=1e-6)

    def test_rigid_motion_similarity(self, small_plant):
        cloud = estimate_normals(small_plant.cloud, radius=0.008)
        kp = detect_keypoints(cloud, "uniform", spacing=0.02)[:40]
        kept, base, _ = shot_rows(cloud, kp, radius=0.016)
        rng = np.random.default_rng(5)
        sims = []
        for _ in range(5):
            rot = random_rotation(rng)
            moved = cloud.transformed(rot, rng.uniform(-1, 1, 3))
            kept2, turned, _ = shot_rows(moved, kp, radius=0.016)
            common = np.intersect1d(kept, kept2)
            a = base[np.searchsorted(kept, common)]
            b = turned[np.searchsorted(kept2, common)]
            sims.append(np.sum(a * b, axis=1).mean())
        assert np.mean(sims) >= 0.95

    def test_duplicate_support_skipped(self):
        pos = np.tile([[1.0, 2.0, 3.0]], (8, 1))
        nrm = np.tile([0.0, 0.0, 1.0], (8, 1))
        cloud = PointCloud(pos, np.full((8, 3), 0.5), nrm)
        with pytest.warns(UserWarning, match="degenerate"):
            kept, rows, _ = shot_rows(cloud, np.array([0]), radius=0.1)
        assert len(kept) == 0


class TestRops:
    def test_dimension(self):
        rng = np.random.default_rng(2)
        cloud = random_patch(rng)
        kept, rows = rops_rows(cloud, np.arange(6), radius=0.06)
        assert rows.shape[1] == 135

    def test_matches_projection_oracle(self):
        rng = np.random.default_rng(9)
        # near-flat square patch with slight jitter to stabilize the frame
        n = 200
        pos = np.column_stack([rng.uniform(-0.05, 0.05, n),
                               rng.uniform(-0.03, 0.03, n),
                               rng.normal(0, 0.002, n)])
        center = np.zeros(3)
        radius = 0.12
        frame = compute_lrf(pos, center, radius)
        assert frame is not None
        mine = rops_descriptor(pos, center, frame, radius)
        ref = oracle_rops((pos - center) @ frame.T, radius)
        assert np.abs(mine - ref).max() < 1e-6

    def test_uniform_patch_entropy(self):
        # dense uniform square: entropy of the flat-plane projection close
        # to the log of its occupied-cell count
        rng = np.random.default_rng(4)
        n = 4000
        pos = np.column_stack([rng.uniform(-0.05, 0.05, n),
                               rng.uniform(-0.05, 0.05, n),
                               rng.normal(0, 0.0005, n)])
        radius = np.linalg.norm(pos, axis=1).max() * 1.0001
        frame = compute_lrf(pos, np.zeros(3), radius)
        desc = rops_descriptor(pos, np.zeros(3), frame, radius)
        # axis x, angle 0, plane xy is block (0,0,0) → entropy index 4
        ent = desc[4]
        local = pos @ frame.T
        idx = np.clip(((local[:, :2] + radius) / (2 * radius) * 5).astype(int),
                      0, 4)
        occupied = len(set(map(tuple, idx)))
        assert abs(ent - math.log(occupied)) < 0.35

    def test_rigid_motion_similarity(self, small_plant):
        cloud = estimate_normals(small_plant.cloud, radius=0.008)
        kp = detect_keypoints(cloud, "uniform", spacing=0.02)[:30]
        kept, base = rops_rows(cloud, kp, radius=0.016)
        rng = np.random.default_rng(6)
        sims = []
        for _ in range(5):
            rot = random_rotation(rng)
            moved = cloud.transformed(rot, rng.uniform(-1, 1, 3))
            kept2, turned = rops_rows(moved, kp, radius=0.016)
            common = np.intersect1d(kept, kept2)
            a = base[np.searchsorted(kept, common)]
            b = turned[np.searchsorted(kept2, common)]
            na = np.linalg.norm(a, axis=1)
            nb = np.linalg.norm(b, axis=1)
            sims.append((np.sum(a * b, axis=1) / (na * nb)).mean())
        assert np.mean(sims) >= 0.95


class TestLocality:
    def test_distant_points_do_not_affect_descriptors(self):
        rng = np.random.default_rng(13)
        near = rng.uniform(-0.04, 0.04, (150, 3))
        far = rng.uniform(0.5, 0.6, (50, 3))
        nrm = rng.normal(size=(200, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        pos = np.vstack([near, far])
        cloud_a = PointCloud(pos, np.full((200, 3), 0.5), nrm)
        far_moved = far + rng.uniform(0.01, 0.02, far.shape)
        cloud_b = PointCloud(np.vstack([near, far_moved]),
                             np.full((200, 3), 0.5), nrm)
        kp = np.arange(5)
        radius = 0.08   # influence ≤ 2*radius for fpfh, still < gap
        _, fa = fpfh_rows(cloud_a, kp, radius)
        _, fb = fpfh_rows(cloud_b, kp, radius)
        assert np.array_equal(fa, fb)
        _, sa, _ = shot_rows(cloud_a, kp, radius)
        _, sb, _ = shot_rows(cloud_b, kp, radius)
        assert np.array_equal(sa, sb)
        _, ra = rops_rows(cloud_a, kp, radius)
        _, rb = rops_rows(cloud_b, kp, radius)
        assert np.array_equal(ra, rb)


class TestKeypoints:
    def test_uniform_count_matches_voxel_occupancy(self):
        rng = np.random.default_rng(17)
        pos = rng.uniform(0, 1, (10_000, 3)) * [0.3, 0.3, 0.08]
        nrm = rng.normal(size=(10_000, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        cloud = PointCloud(pos, np.full((10_000, 3), 0.5), nrm)
        spacing = 0.02
        kp = detect_keypoints(cloud, "uniform", spacing=spacing)
        cells = set(map(tuple, np.floor(cloud.positions / spacing).astype(int)))
        assert abs(len(kp) - len(cells)) <= 0.2 * len(cells)

    def test_uniform_tiny_spacing_selects_all(self):
        rng = np.random.default_rng(1)
        pos = rng.uniform(0, 0.1, (80, 3))
        nrm = np.tile([0.0, 0.0, 1.0], (80, 1))
        cloud = PointCloud(pos, np.full((80, 3), 0.5), nrm)
        kp = detect_keypoints(cloud, "uniform", spacing=1e-5)
        assert np.array_equal(kp, np.arange(80))

    def test_iss_planar_cloud_has_no_keypoints(self):
        ax = np.arange(20) * 0.01
        xx, yy = np.meshgrid(ax, ax)
        pos = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(400)])
        nrm = np.tile([0.0, 0.0, 1.0], (400, 1))
        cloud = PointCloud(pos, np.full((400, 3), 0.5), nrm)
        with pytest.raises(PipelineError):
            detect_keypoints(cloud, "iss", resolution=0.01)

    def test_iss_finds_corners_of_noisy_box(self, small_plant):
        cloud = estimate_normals(small_plant.cloud, radius=0.008)
        kp = detect_keypoints(cloud, "iss", resolution=0.004)
        assert len(kp) > 0
        assert cloud.valid_normal_mask()[kp].all()

    def test_keypoints_require_normals(self):
        cloud = make_cloud(np.random.default_rng(0).uniform(0, 1, (50, 3)))
        with pytest.raises(PipelineError):
            detect_keypoints(cloud, "uniform", spacing=0.1)


class TestDescriptorIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(21)
        cloud = random_patch(rng)
        ds = compute_descriptors(cloud, np.arange(8), "fpfh", radius=0.06)
        path = tmp_path / "d.desc"
        save_descriptors(ds, path)
        back = load_descriptors(path)
        assert back.kind == ds.kind
        assert np.array_equal(back.rows, ds.rows)
        assert np.array_equal(back.keypoints, ds.keypoints)
        assert np.array_equal(back.positions, ds.positions)

    def test_dispatch_dimensions(self):
        rng = np.random.default_rng(23)
        cloud = random_patch(rng, n=150)
        for kind, dim in (("fpfh", 33), ("shot", 352), ("rops", 135)):
            ds = compute_descriptors(cloud, np.arange(6), kind, radius=0.06)
            assert ds.rows.shape[1] == dim
            assert len(ds.keypoints) == len(ds.rows)

    def test_row_alignment_enforced(self):
        with pytest.raises(ValueError):
            DescriptorSet("fpfh", np.arange(3), np.zeros((3, 3)),
                          np.zeros((2, 33)))

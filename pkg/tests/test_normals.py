import numpy as np

from canopy3d.cloud import PointCloud, make_cloud
from canopy3d.normals import estimate_normals

from conftest import grid_cloud, random_rotation


class TestPlanarCloud:
    def test_normals_perpendicular_to_plane(self):
        cloud = grid_cloud(n_side=9, spacing=0.01)
        out = estimate_normals(cloud, radius=0.025)
        nrm = out.normals[out.valid_normal_mask()]
        assert len(nrm) == len(cloud)
        assert np.allclose(np.abs(nrm[:, 2]), 1.0, atol=1e-6)

    def test_oriented_toward_viewpoint(self):
        cloud = grid_cloud(n_side=9, spacing=0.01)
        out = estimate_normals(cloud, radius=0.025)
        # default viewpoint sits above the centroid
        assert np.all(out.normals[:, 2] > 0)


class TestSphericalCloud:
    def make_sphere(self, n=600, radius=0.1, seed=0):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=(n, 3))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        return make_cloud(raw * radius), raw

    def test_normals_radial(self):
        cloud, outward = self.make_sphere()
        out = estimate_normals(cloud, radius=0.04,
                               viewpoint=np.array([0.0, 0.0, 10.0]))
        mask = out.valid_normal_mask()
        assert mask.mean() > 0.99
        dots = np.abs(np.sum(out.normals[mask] * outward[mask], axis=1))
        assert np.percentile(dots, 5) > 0.97


class TestDegenerateNeighborhoods:
    def test_isolated_point_marked_invalid(self):
        pos = np.vstack([np.zeros((1, 3)),
                         np.array([[5.0, 5.0, 5.0]]),
                         np.array([[5.01, 5.0, 5.0]]),
                         np.array([[5.0, 5.01, 5.0]]),
                         np.array([[5.01, 5.01, 5.0]])])
        out = estimate_normals(make_cloud(pos), radius=0.05)
        mask = out.valid_normal_mask()
        assert not mask[0]
        assert mask[1:].all()
        assert np.isnan(out.normals[0]).all()

    def test_collinear_points_invalid(self):
        pos = np.column_stack([np.linspace(0, 0.1, 30),
                               np.zeros(30), np.zeros(30)])
        out = estimate_normals(make_cloud(pos), radius=0.05)
        assert not out.valid_normal_mask().any()


class TestEquivariance:
    def test_rotation_equivariant_up_to_sign(self, rng):
        pts = rng.uniform(0, 0.1, (300, 3))
        pts[:, 2] *= 0.2   # flattened slab so normals are stable
        cloud = make_cloud(pts)
        base = estimate_normals(cloud, radius=0.03)
        rot = random_rotation(rng)
        moved = estimate_normals(
            PointCloud(pts @ rot.T, cloud.colors), radius=0.03)
        mask = base.valid_normal_mask() & moved.valid_normal_mask()
        assert mask.mean() > 0.95
        rotated = base.normals[mask] @ rot.T
        agree = np.abs(np.sum(rotated * moved.normals[mask], axis=1))
        assert np.all(agree > 1.0 - 1e-5)

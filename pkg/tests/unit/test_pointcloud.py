from typing import NamedTuple

import numpy as np
import pytest
from pydantic import ValidationError
from streetnav.camera import project_points
from streetnav.exceptions import DomainError
from streetnav.pointcloud import (
    DepthImage,
    PointCloud,
    cloud_from_depth,
    estimate_normals,
    neighborhoods,
    normal_inconsistency,
    plane_normal,
    sampled_pixels,
)


def plane_cloud(n: int = 12, spacing: float = 0.1, viewpoint=(0.0, -5.0, 0.0)):
    xs, zs = np.meshgrid(np.arange(n) * spacing, np.arange(n) * spacing)
    points = np.stack([xs.ravel(), np.zeros(xs.size), zs.ravel()], axis=1)
    return PointCloud(points=points, viewpoint=viewpoint)


class CloudParams(NamedTuple):
    stride: int
    expected_points: int


cloud_test_cases = [
    pytest.param(CloudParams(stride=1, expected_points=64 * 48), id="every pixel"),
    pytest.param(CloudParams(stride=4, expected_points=16 * 12), id="stride 4"),
    pytest.param(CloudParams(stride=5, expected_points=13 * 10), id="uneven stride"),
]


class TestCloudFromDepth:
    @pytest.mark.parametrize("parameters", cloud_test_cases)
    def test_point_count(self, camera, parameters: CloudParams):
        depth = DepthImage.from_array(np.full((48, 64), 3.0))
        cloud = cloud_from_depth(depth, camera, parameters.stride)
        assert len(cloud) == parameters.expected_points

    def test_invalid_pixels_are_dropped(self, camera):
        values = np.full((48, 64), 2.0)
        values[:, :32] = 0.0
        cloud = cloud_from_depth(DepthImage.from_array(values), camera)
        assert len(cloud) == 48 * 32
        assert np.all(cloud.points[:, 2] == 2.0)

    def test_points_reproject_to_pixel_centers(self, posed_camera, rng):
        values = rng.uniform(0.5, 9.0, size=(48, 64))
        cloud = cloud_from_depth(DepthImage.from_array(values), posed_camera)
        uv, z, valid = project_points(posed_camera, cloud.points)
        rows, cols = sampled_pixels(64, 48, 1)
        assert valid.all()
        assert np.allclose(uv, np.stack([cols + 0.5, rows + 0.5], axis=1), atol=1e-9)
        assert np.allclose(z, values.ravel(), atol=1e-9)

    def test_viewpoint_is_camera_center(self, posed_camera):
        depth = DepthImage.from_array(np.ones((48, 64)))
        cloud = cloud_from_depth(depth, posed_camera, 8)
        assert np.array_equal(cloud.viewpoint, posed_camera.center)

    def test_colors_are_sampled(self, camera):
        image = np.zeros((48, 64, 3), dtype=np.uint8)
        image[..., 0] = np.arange(64)
        depth = DepthImage.from_array(np.ones((48, 64)))
        cloud = cloud_from_depth(depth, camera, 4, image)
        assert np.array_equal(np.unique(cloud.colors[:, 0]), np.arange(0, 64, 4))

    def test_dimension_mismatch(self, camera):
        depth = DepthImage.from_array(np.ones((10, 10)))
        with pytest.raises(DomainError):
            cloud_from_depth(depth, camera)

    def test_bad_stride(self, camera):
        depth = DepthImage.from_array(np.ones((48, 64)))
        with pytest.raises(DomainError):
            cloud_from_depth(depth, camera, 0)


class TestDepthImage:
    @pytest.mark.parametrize(
        "values",
        [
            pytest.param([[1.0, -1.0]], id="negative depth"),
            pytest.param([[1.0, np.inf]], id="infinite depth"),
            pytest.param([[np.nan, 1.0]], id="nan depth"),
        ],
    )
    def test_invalid(self, values):
        with pytest.raises(ValidationError):
            DepthImage.from_array(np.array(values))

    def test_shape_must_match(self):
        with pytest.raises(ValidationError):
            DepthImage(width=3, height=2, depth=np.ones((3, 2)))


class TestPointCloud:
    def test_normals_must_be_unit(self):
        with pytest.raises(ValidationError):
            PointCloud(points=np.zeros((2, 3)), normals=np.ones((2, 3)))

    def test_colors_must_match_points(self):
        with pytest.raises(ValidationError):
            PointCloud(points=np.zeros((2, 3)), colors=np.zeros((3, 3)))

    def test_subset(self):
        cloud = plane_cloud(4)
        part = cloud.subset([1, 3])
        assert np.array_equal(part.points, cloud.points[[1, 3]])
        assert np.array_equal(part.viewpoint, cloud.viewpoint)


class TestNeighbors:
    def test_knn_matches_brute_force(self, rng):
        points = rng.uniform(0, 1, size=(300, 3))
        nbrs = neighborhoods(PointCloud(points=points), 8)
        for i in range(0, 300, 7):
            found = nbrs[i]
            dist = np.linalg.norm(points - points[i], axis=1)
            order = np.lexsort((np.arange(300), dist))
            assert found[0] == i
            assert list(found[1:]) == [j for j in order if j != i][:8]

    def test_ties_go_to_the_smaller_index(self):
        nbrs = neighborhoods(plane_cloud(6), 3)
        assert list(nbrs[0]) == [0, 1, 6, 7]
        assert list(nbrs[7]) == [7, 1, 6, 8]

    def test_neighborhood_shape(self):
        nbrs = neighborhoods(plane_cloud(6), 5)
        assert nbrs.shape == (36, 6)
        assert np.array_equal(nbrs[:, 0], np.arange(36))

    def test_too_few_points(self):
        with pytest.raises(DomainError):
            neighborhoods(plane_cloud(2), 8)

    def test_small_k(self):
        with pytest.raises(DomainError):
            neighborhoods(plane_cloud(4), 2)


class TestNormals:
    def test_plane_normal(self):
        normal = plane_normal(plane_cloud(5).points)
        assert np.allclose(np.abs(normal), [0.0, 1.0, 0.0])

    def test_normals_face_the_viewpoint(self):
        cloud = estimate_normals(plane_cloud(), k=8)
        assert np.allclose(cloud.normals, [0.0, -1.0, 0.0])

    def test_explicit_viewpoint_flips_normals(self):
        cloud = estimate_normals(plane_cloud(), k=8, viewpoint=[0.5, 4.0, 0.5])
        assert np.allclose(cloud.normals, [0.0, 1.0, 0.0])
        assert np.array_equal(cloud.viewpoint, [0.5, 4.0, 0.5])

    def test_deterministic(self, rng):
        cloud = PointCloud(points=rng.uniform(0, 1, size=(200, 3)))
        first = estimate_normals(cloud, k=10)
        second = estimate_normals(cloud, k=10)
        assert np.array_equal(first.normals, second.normals)

    def test_plane_is_consistent(self):
        cloud = estimate_normals(plane_cloud(), k=8)
        assert np.max(normal_inconsistency(cloud, 8)) < 1e-3

    def test_inconsistency_needs_normals(self):
        with pytest.raises(DomainError):
            normal_inconsistency(plane_cloud(), 8)

    def test_scene_floor_and_wall(self, scene):
        cloud = estimate_normals(cloud_from_depth(scene.depth, scene.camera, 8))
        floor = (cloud.points[:, 1] > 1.35) & (cloud.points[:, 2] < 1.7)
        wall = np.isclose(cloud.points[:, 2], 2.0) & (cloud.points[:, 1] < 0.5)
        assert np.mean(cloud.normals[floor, 1] < -0.9) > 0.9
        assert np.mean(cloud.normals[wall, 2] < -0.9) > 0.9

"""Depth-map unprojection and surface normal estimation."""
import logging
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial import KDTree

from .camera import CameraModel, as_vector, unproject_pixels
from .exceptions import DomainError

logger = logging.getLogger(__name__)

DEFAULT_K = 16
DEFAULT_STRIDE = 4
EIGEN_TIE_TOL = 1e-9
TIE_SLACK = 1e-9


class DepthImage(BaseModel):
    """row-major metric depth, 0 marks invalid pixels"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    width: int = Field(gt=0)
    height: int = Field(gt=0)
    depth: np.ndarray

    @model_validator(mode="after")
    def _check_depth(self) -> "DepthImage":
        depth = np.array(self.depth, dtype=float)
        if depth.shape != (self.height, self.width):
            raise ValueError(
                f"depth must have shape {(self.height, self.width)}, got {depth.shape}"
            )
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise ValueError("depth values must be finite and non-negative")
        depth.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        return self

    @classmethod
    def from_array(cls, depth: np.ndarray) -> "DepthImage":
        depth = np.asarray(depth, dtype=float)
        return cls(width=depth.shape[1], height=depth.shape[0], depth=depth)


class PointCloud(BaseModel):
    """
    Points in the world frame with optional unit normals and colors. `viewpoint`
    is the center of the capturing camera, normals are oriented toward it.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    viewpoint: np.ndarray = Field(default_factory=lambda: np.zeros(3))

    @field_validator("points", mode="before")
    @classmethod
    def _check_points(cls, value) -> np.ndarray:
        pts = np.array(value, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        return pts

    @field_validator("viewpoint", mode="before")
    @classmethod
    def _check_viewpoint(cls, value) -> np.ndarray:
        return as_vector(value, 3, "viewpoint")

    @model_validator(mode="after")
    def _check_attributes(self) -> "PointCloud":
        if self.normals is not None:
            normals = np.array(self.normals, dtype=float).reshape(-1, 3)
            if normals.shape != self.points.shape:
                raise ValueError("normal count must equal point count")
            if np.any(np.abs(np.linalg.norm(normals, axis=1) - 1.0) > 1e-6):
                raise ValueError("normals must be unit length")
            normals.setflags(write=False)
            object.__setattr__(self, "normals", normals)
        if self.colors is not None:
            colors = np.array(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(colors) != len(self.points):
                raise ValueError("color count must equal point count")
            colors.setflags(write=False)
            object.__setattr__(self, "colors", colors)
        return self

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=int)
        return PointCloud(
            points=self.points[idx],
            normals=None if self.normals is None else self.normals[idx],
            colors=None if self.colors is None else self.colors[idx],
            viewpoint=self.viewpoint,
        )


def sampled_pixels(
    width: int, height: int, stride: int
) -> Tuple[np.ndarray, np.ndarray]:
    """row-major (row, col) grids of the pixels sampled with `stride`"""
    rows, cols = np.meshgrid(
        np.arange(0, height, stride), np.arange(0, width, stride), indexing="ij"
    )
    return rows.reshape(-1), cols.reshape(-1)


def cloud_from_depth(
    depth: DepthImage,
    model: CameraModel,
    stride: int = 1,
    image: Optional[np.ndarray] = None,
) -> PointCloud:
    """
    unprojects every sampled pixel with positive depth through its pixel center

    :param image: optional (H, W, 3) RGB image, sampled into point colors
    """
    if stride < 1:
        raise DomainError(f"stride must be >= 1, got {stride}")
    if (depth.width, depth.height) != (model.width, model.height):
        raise DomainError(
            f"depth is {depth.width}x{depth.height}, "
            f"camera is {model.width}x{model.height}"
        )
    rows, cols = sampled_pixels(depth.width, depth.height, stride)
    values = depth.depth[rows, cols]
    valid = values > 0
    rows, cols, values = rows[valid], cols[valid], values[valid]
    points = unproject_pixels(model, cols + 0.5, rows + 0.5, values)
    colors = None
    if image is not None:
        if image.shape[:2] != (depth.height, depth.width):
            raise DomainError("image dimensions do not match the depth image")
        colors = image[rows, cols]
    logger.debug("unprojected %d of %d sampled pixels", len(points), valid.size)
    return PointCloud(points=points, colors=colors, viewpoint=model.center)


def neighborhoods(cloud: PointCloud, k: int) -> np.ndarray:
    """
    (N, k+1) neighbor indices, the point itself first, then its `k` nearest
    neighbors with ties broken by the smaller point index
    """
    if k < 3:
        raise DomainError(f"k must be >= 3, got {k}")
    if len(cloud) < k + 1:
        raise DomainError(f"need at least {k + 1} points, got {len(cloud)}")
    points = cloud.points
    tree = KDTree(points)
    dist, _ = tree.query(points, k=k + 1)
    # every point tied with the k-th neighbor is a candidate
    radii = dist[:, -1] * (1.0 + TIE_SLACK) + TIE_SLACK
    nbrs = np.empty((len(points), k + 1), dtype=int)
    for i, idx in enumerate(tree.query_ball_point(points, radii)):
        idx = np.asarray(idx, dtype=int)
        d = np.linalg.norm(points[idx] - points[i], axis=1)
        ordered = idx[np.lexsort((idx, d))]
        nbrs[i, 0] = i
        nbrs[i, 1:] = ordered[ordered != i][:k]
    return nbrs


def plane_normal(neighbors: np.ndarray) -> np.ndarray:
    """unit normal of the PCA plane fit, deterministic under eigenvalue ties"""
    centered = neighbors - neighbors.mean(axis=0)
    cov = centered.T @ centered / len(neighbors)
    eigvals, eigvecs = np.linalg.eigh(cov)
    tol = EIGEN_TIE_TOL * max(1.0, abs(eigvals[-1]))
    tied = [eigvecs[:, i] for i in range(3) if eigvals[i] - eigvals[0] <= tol]
    normal = max(tied, key=lambda vec: tuple(np.round(np.abs(vec), 12)))
    return normal / np.linalg.norm(normal)


def estimate_normals(
    cloud: PointCloud,
    k: int = DEFAULT_K,
    viewpoint: Optional[np.ndarray] = None,
) -> PointCloud:
    """
    PCA normal of every point's `k`-neighborhood, flipped to face `viewpoint`
    (defaults to the cloud's capturing camera center)
    """
    view = cloud.viewpoint
    if viewpoint is not None:
        view = as_vector(viewpoint, 3, "viewpoint")
    nbrs = neighborhoods(cloud, k)
    normals = np.empty_like(cloud.points)
    for i, idx in enumerate(nbrs):
        normal = plane_normal(cloud.points[idx])
        if np.dot(normal, view - cloud.points[i]) < 0:
            normal = -normal
        normals[i] = normal
    logger.debug("estimated %d normals with k=%d", len(normals), k)
    return PointCloud(
        points=cloud.points, normals=normals, colors=cloud.colors, viewpoint=view
    )


def normal_inconsistency(cloud: PointCloud, k: int = DEFAULT_K) -> np.ndarray:
    """mean angle (degrees) between each normal and the normals of its neighbors"""
    if cloud.normals is None:
        raise DomainError("cloud has no normals")
    nbrs = neighborhoods(cloud, k)
    own = cloud.normals[:, None, :]
    others = cloud.normals[nbrs[:, 1:]]
    cosines = np.clip(np.sum(own * others, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cosines)).mean(axis=1)

"""
Constraint frames: the global point cloud rendered through virtual cameras placed
along a planned trajectory, with a z-buffer for occlusions.
"""
import logging
from typing import List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .camera import CameraModel, RigidTransform, project_points, yaw_rotation
from .exceptions import DomainError
from .pointcloud import PointCloud
from .trajectory import Trajectory

logger = logging.getLogger(__name__)

CAMERA_HEIGHT = 1.4
DEPTH_TIE_DECIMALS = 9


class ConstraintFrame(BaseModel):
    """rendered depth (0 where no point landed) and optional RGB of one pose"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    width: int = Field(gt=0)
    height: int = Field(gt=0)
    depth: np.ndarray
    color: Optional[np.ndarray] = None
    pose_index: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_images(self) -> "ConstraintFrame":
        depth = np.array(self.depth, dtype=float)
        if depth.shape != (self.height, self.width):
            raise ValueError(f"depth must have shape {(self.height, self.width)}")
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise ValueError("depth values must be finite and non-negative")
        depth.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        if self.color is not None:
            color = np.array(self.color, dtype=np.uint8)
            if color.shape != (self.height, self.width, 3):
                raise ValueError("color must be an (height, width, 3) image")
            if np.any(color[depth == 0] != 0):
                raise ValueError("colored pixels must have positive depth")
            color.setflags(write=False)
            object.__setattr__(self, "color", color)
        return self

    @property
    def coverage(self) -> float:
        return float(np.count_nonzero(self.depth)) / self.depth.size


def virtual_poses(
    traj: Union[Trajectory, np.ndarray], camera_height: float = CAMERA_HEIGHT
) -> List[RigidTransform]:
    """
    one camera-to-world transform per trajectory pose (a Trajectory or raw (N, 4)
    poses), in the frame the poses are expressed in: camera center at
    (x, -(y + camera_height), z) of the y-down convention, canonical camera turned
    by the pose yaw
    """
    poses = traj.poses if isinstance(traj, Trajectory) else np.asarray(traj, float)
    return [
        RigidTransform(
            rotation=yaw_rotation(yaw), translation=[x, -(y + camera_height), z]
        )
        for x, y, z, yaw in poses.reshape(-1, 4)
    ]


def _splat_offsets(radius: int) -> np.ndarray:
    steps = np.arange(-radius, radius + 1)
    du, dv = np.meshgrid(steps, steps)
    return np.stack([du.reshape(-1), dv.reshape(-1)], axis=1)


def render_frame(
    cloud: PointCloud,
    model: CameraModel,
    pose_index: int = 0,
    splat_radius: int = 0,
) -> ConstraintFrame:
    """
    z-buffered rendering of `cloud` through `model`; every point covers the square
    of pixels within `splat_radius` of the pixel it projects into, the nearest
    depth wins and equal depths go to the lower point index
    """
    uv, z, valid = project_points(model, cloud.points)
    index = np.flatnonzero(valid)
    cols = np.floor(uv[index, 0]).astype(int)
    rows = np.floor(uv[index, 1]).astype(int)
    depth_of = z[index]
    if splat_radius:
        offsets = _splat_offsets(splat_radius)
        cols = (cols[:, None] + offsets[:, 0]).reshape(-1)
        rows = (rows[:, None] + offsets[:, 1]).reshape(-1)
        index = np.repeat(index, len(offsets))
        depth_of = np.repeat(depth_of, len(offsets))
        inside = model.in_frame(cols, rows)
        cols, rows, index, depth_of = (
            cols[inside],
            rows[inside],
            index[inside],
            depth_of[inside],
        )

    depth = np.zeros((model.height, model.width))
    color = None
    if cloud.colors is not None:
        color = np.zeros((model.height, model.width, 3), dtype=np.uint8)
    if index.size:
        pixel = rows * model.width + cols
        order = np.lexsort((index, np.round(depth_of, DEPTH_TIE_DECIMALS), pixel))
        pixel, index, depth_of = pixel[order], index[order], depth_of[order]
        _, first = np.unique(pixel, return_index=True)
        winners = pixel[first]
        depth.flat[winners] = depth_of[first]
        if color is not None:
            color.reshape(-1, 3)[winners] = cloud.colors[index[first]]
    logger.debug(
        "pose %d: %d of %d points in view", pose_index, int(valid.sum()), len(cloud)
    )
    return ConstraintFrame(
        width=model.width,
        height=model.height,
        depth=depth,
        color=color,
        pose_index=pose_index,
    )


def reproject_cloud(
    cloud: PointCloud,
    model: CameraModel,
    poses: Sequence[RigidTransform],
    splat_radius: int = 0,
) -> List[ConstraintFrame]:
    """one constraint frame per pose, the camera intrinsics taken from `model`"""
    if len(cloud) == 0:
        raise DomainError("cannot reproject an empty point cloud")
    if splat_radius < 0:
        raise DomainError(f"splat_radius must be >= 0, got {splat_radius}")
    return [
        render_frame(cloud, model.with_pose(pose), i, splat_radius)
        for i, pose in enumerate(poses)
    ]

"""
Pinhole camera model, rigid pose algebra and Plücker ray embeddings.

Camera frame convention: x right, y down, z forward. A pose is the rigid
transform camera -> world, ``p_world = R @ p_cam + t``, so the camera center in
world coordinates is ``t``. World up is ``-y`` of the canonical start camera.
"""
import logging
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.transform import Rotation

from .exceptions import DomainError

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-9
PLUCKER_TOL = 1e-9
WORLD_UP = np.array([0.0, -1.0, 0.0])


def as_vector(value, size: int, name: str) -> np.ndarray:
    """coerces `value` into a read-only finite float vector of length `size`"""
    arr = np.array(value, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise ValueError(f"{name} must have {size} elements, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


class RigidTransform(BaseModel):
    """rotation (3x3, orthonormal, det +1) and translation (meters)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    rotation: np.ndarray
    translation: np.ndarray

    @field_validator("rotation", mode="before")
    @classmethod
    def _check_rotation(cls, value) -> np.ndarray:
        rot = np.array(value, dtype=float)
        if rot.size == 9:
            rot = rot.reshape(3, 3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got shape {rot.shape}")
        if not np.all(np.isfinite(rot)):
            raise ValueError("rotation must be finite")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant must be +1")
        rot.setflags(write=False)
        return rot

    @field_validator("translation", mode="before")
    @classmethod
    def _check_translation(cls, value) -> np.ndarray:
        return as_vector(value, 3, "translation")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @classmethod
    def from_translation(cls, translation) -> "RigidTransform":
        return cls(rotation=np.eye(3), translation=translation)

    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def apply(self, points: np.ndarray) -> np.ndarray:
        """maps points (3,) or (N, 3) through the transform"""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return (pts - self.translation) @ self.rotation

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )


def compose_pose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """returns a ∘ b, i.e. applying `b` first and then `a`"""
    return RigidTransform(
        rotation=a.rotation @ b.rotation,
        translation=a.rotation @ b.translation + a.translation,
    )


def invert_pose(a: RigidTransform) -> RigidTransform:
    rot_t = a.rotation.T
    return RigidTransform(rotation=rot_t, translation=-(rot_t @ a.translation))


def yaw_rotation(yaw: float) -> np.ndarray:
    """
    Rotation of the canonical camera by `yaw` about the up axis. Yaw 0 looks
    along +Z, positive yaw turns toward +X.
    """
    return Rotation.from_euler("y", yaw).as_matrix()


def look_yaw(yaw: float, center) -> RigidTransform:
    return RigidTransform(rotation=yaw_rotation(yaw), translation=center)


class CameraModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    pose: RigidTransform = Field(default_factory=RigidTransform.identity)

    @model_validator(mode="after")
    def _check_principal_point(self) -> "CameraModel":
        if not 0 <= self.cx < self.width:
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not 0 <= self.cy < self.height:
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")
        return self

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def with_pose(self, pose: RigidTransform) -> "CameraModel":
        return self.model_copy(update={"pose": pose})

    def in_frame(self, u, v) -> np.ndarray:
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


def project(
    model: CameraModel, p_world
) -> Optional[Tuple[float, float, float]]:
    """
    projects a world point to pixel coordinates

    :return: ``(u, v, z_cam)`` or None when the point is behind the camera or
        falls outside of the image
    """
    x, y, z = model.pose.apply_inverse(as_vector(p_world, 3, "p_world"))
    if z <= 0:
        return None
    u = model.fx * x / z + model.cx
    v = model.fy * y / z + model.cy
    if not (0 <= u < model.width and 0 <= v < model.height):
        return None
    return float(u), float(v), float(z)


def project_points(
    model: CameraModel, points: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    batch version of `project`

    :return: pixel coordinates (N, 2), camera depth (N,) and the validity mask
        (N,) of points in front of the camera and inside the image
    """
    pts_cam = model.pose.apply_inverse(np.asarray(points, dtype=float).reshape(-1, 3))
    z = pts_cam[:, 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = model.fx * pts_cam[:, 0] / safe_z + model.cx
    v = model.fy * pts_cam[:, 1] / safe_z + model.cy
    valid = front & model.in_frame(u, v)
    return np.stack([u, v], axis=1), z, valid


def unproject(model: CameraModel, u: float, v: float, depth: float) -> np.ndarray:
    """right-inverse of `project`, `depth` is the camera z coordinate"""
    if not depth > 0:
        raise DomainError(f"depth must be positive, got {depth}")
    if not model.in_frame(u, v):
        raise DomainError(f"pixel ({u}, {v}) outside of the image")
    p_cam = np.array(
        [(u - model.cx) * depth / model.fx, (v - model.cy) * depth / model.fy, depth]
    )
    return model.pose.apply(p_cam)


def unproject_pixels(
    model: CameraModel, u: np.ndarray, v: np.ndarray, depth: np.ndarray
) -> np.ndarray:
    u = np.asarray(u, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    depth = np.asarray(depth, dtype=float).reshape(-1)
    if np.any(depth <= 0):
        raise DomainError("depth must be positive")
    p_cam = np.stack(
        [(u - model.cx) * depth / model.fx, (v - model.cy) * depth / model.fy, depth],
        axis=1,
    )
    return model.pose.apply(p_cam)


def pixel_rays(model: CameraModel) -> np.ndarray:
    """unit world-frame ray directions through pixel centers, shape (H, W, 3)"""
    cols = np.arange(model.width) + 0.5
    rows = np.arange(model.height) + 0.5
    uu, vv = np.meshgrid(cols, rows)
    dirs = np.stack(
        [(uu - model.cx) / model.fx, (vv - model.cy) / model.fy, np.ones_like(uu)],
        axis=-1,
    )
    dirs = dirs @ model.pose.rotation.T
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


class PluckerMap(BaseModel):
    """per-pixel 6-vectors (direction, moment) in the world frame"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    width: int = Field(gt=0)
    height: int = Field(gt=0)
    rays: np.ndarray

    @model_validator(mode="after")
    def _check_rays(self) -> "PluckerMap":
        rays = self.rays
        if rays.shape != (self.height, self.width, 6):
            raise ValueError(
                f"rays must have shape {(self.height, self.width, 6)}, got {rays.shape}"
            )
        d, m = rays[..., :3], rays[..., 3:]
        if np.max(np.abs(np.linalg.norm(d, axis=-1) - 1.0)) > PLUCKER_TOL:
            raise ValueError("ray directions must be unit length")
        if np.max(np.abs(np.sum(d * m, axis=-1))) > PLUCKER_TOL:
            raise ValueError("ray moments must be orthogonal to directions")
        rays.setflags(write=False)
        return self

    @property
    def directions(self) -> np.ndarray:
        return self.rays[..., :3]

    @property
    def moments(self) -> np.ndarray:
        return self.rays[..., 3:]


def plucker_moment(origin, direction) -> np.ndarray:
    return np.cross(np.asarray(origin, dtype=float), np.asarray(direction, dtype=float))


def plucker_embed(model: CameraModel) -> PluckerMap:
    d = pixel_rays(model)
    m = plucker_moment(np.broadcast_to(model.center, d.shape), d)
    rays = np.concatenate([d, m], axis=-1)
    return PluckerMap(width=model.width, height=model.height, rays=rays)

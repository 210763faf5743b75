"""
Trajectories of [x, y, z, yaw] poses: lifting grid paths to 3D and the
normalize / resample / smooth preprocessing chain.

x and z span the horizontal plane of the agent frame, y is the height above the
agent origin (up positive) and yaw turns about up, 0 along +Z and positive
toward +X.
"""
import logging
import math
from typing import Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .exceptions import DomainError
from .occupancy import OccupancyGrid, segment_collides
from .planner import GridPath

logger = logging.getLogger(__name__)

DEFAULT_RESAMPLE_N = 20
CHAIKIN_ITERATIONS = 2
ZERO_STEP = 1e-12


def wrap_angle(angle):
    """wraps into (-pi, pi], leaving in-range values untouched"""
    a = np.asarray(angle, dtype=float)
    wrapped = np.mod(a + np.pi, 2 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2 * np.pi, wrapped)
    result = np.where((a > -np.pi) & (a <= np.pi), a, wrapped)
    return float(result) if result.ndim == 0 else result


class TrajectoryMeta(BaseModel):
    """
    Provenance of a trajectory. `origin` holds the raw [x, y, z, yaw] first pose a
    normalized trajectory was measured from; `heading_aligned` is False for
    translation-only normalization.
    """

    model_config = ConfigDict(frozen=True)

    resampled_to: Optional[int] = None
    smoothed: bool = False
    heading_aligned: bool = True
    origin: Optional[Tuple[float, float, float, float]] = None


class Trajectory(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    poses: np.ndarray
    frame: Literal["agent_raw", "normalized"] = "agent_raw"
    meta: TrajectoryMeta = Field(default_factory=TrajectoryMeta)

    @field_validator("poses", mode="before")
    @classmethod
    def _check_poses(cls, value) -> np.ndarray:
        poses = np.array(value, dtype=float)
        if poses.ndim != 2 or poses.shape[1] != 4:
            raise ValueError(f"poses must have shape (N, 4), got {poses.shape}")
        if len(poses) < 2:
            raise ValueError("a trajectory needs at least 2 poses")
        if not np.all(np.isfinite(poses)):
            raise ValueError("pose values must be finite")
        if np.any(poses[:, 3] <= -np.pi) or np.any(poses[:, 3] > np.pi):
            raise ValueError("yaw must lie in (-pi, pi]")
        poses.setflags(write=False)
        return poses

    @model_validator(mode="after")
    def _check_frame(self) -> "Trajectory":
        if self.frame == "normalized":
            if np.max(np.abs(self.poses[0, :3])) > 1e-9:
                raise ValueError("normalized trajectory must start at the origin")
            if self.meta.heading_aligned and abs(self.poses[0, 3]) > 1e-9:
                raise ValueError("normalized trajectory must start with yaw 0")
        return self

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def xz(self) -> np.ndarray:
        return self.poses[:, [0, 2]]

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :3]


def headings(xz: np.ndarray, initial: float = 0.0) -> np.ndarray:
    """
    yaw of every step direction; zero-length steps carry the previous yaw forward
    and the last pose copies the yaw before it
    """
    steps = np.diff(xz, axis=0)
    yaws = np.empty(len(xz))
    previous = initial
    for i, (dx, dz) in enumerate(steps):
        if math.hypot(dx, dz) > ZERO_STEP:
            previous = math.atan2(dx, dz)
        yaws[i] = previous
    yaws[-1] = yaws[-2] if len(xz) > 1 else initial
    return wrap_angle(yaws)


def _assemble(xz: np.ndarray, y: np.ndarray, initial_yaw: float = 0.0) -> np.ndarray:
    return np.column_stack([xz[:, 0], y, xz[:, 1], headings(xz, initial_yaw)])


def lift_path(
    path: GridPath,
    grid: OccupancyGrid,
    ground_heights: Optional[np.ndarray] = None,
) -> Trajectory:
    """
    cell-center waypoints in the agent frame, height from the cell's median ground
    height (0 where unknown) and yaw from the direction to the next waypoint
    """
    if len(path.cells) < 2:
        raise DomainError("cannot lift a path shorter than 2 cells")
    xz = np.array([grid.center_of(cell) for cell in path.cells])
    y = np.zeros(len(xz))
    if ground_heights is not None:
        for i, (col, row) in enumerate(path.cells):
            value = ground_heights[row, col]
            if np.isfinite(value):
                y[i] = value
    return Trajectory(poses=_assemble(xz, y), frame="agent_raw")


def into_heading_frame(xz: np.ndarray, yaw: float) -> np.ndarray:
    """expresses world xz vectors in a frame rotated by `yaw` about up"""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.column_stack([c * xz[:, 0] - s * xz[:, 1], s * xz[:, 0] + c * xz[:, 1]])


def from_heading_frame(xz: np.ndarray, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.column_stack([c * xz[:, 0] + s * xz[:, 1], -s * xz[:, 0] + c * xz[:, 1]])


def normalize_origin(traj: Trajectory, translation_only: bool = False) -> Trajectory:
    """
    rigidly moves the trajectory so that its first pose becomes the origin with yaw
    0 (or only translates it when `translation_only`); normalized input is returned
    as is
    """
    if traj.frame == "normalized":
        return traj
    first = traj.poses[0]
    yaw0 = 0.0 if translation_only else float(first[3])
    shifted = traj.poses[:, :3] - first[:3]
    xz = into_heading_frame(shifted[:, [0, 2]], yaw0)
    yaws = wrap_angle(traj.poses[:, 3] - yaw0) if yaw0 else traj.poses[:, 3]
    poses = np.column_stack([xz[:, 0], shifted[:, 1], xz[:, 1], yaws])
    meta = traj.meta.model_copy(
        update={
            "origin": tuple(float(v) for v in first),
            "heading_aligned": not translation_only,
        }
    )
    return Trajectory(poses=poses, frame="normalized", meta=meta)


def denormalize_poses(
    poses: np.ndarray, origin: Sequence[float], heading_aligned: bool = True
) -> np.ndarray:
    """(N, 4) normalized poses back into the raw frame of `origin`"""
    poses = np.asarray(poses, dtype=float).reshape(-1, 4)
    ox, oy, oz, oyaw = origin
    rotation = oyaw if heading_aligned else 0.0
    xz = from_heading_frame(poses[:, [0, 2]], rotation) + np.array([ox, oz])
    yaws = wrap_angle(poses[:, 3] + rotation)
    return np.column_stack([xz[:, 0], poses[:, 1] + oy, xz[:, 1], yaws])


def denormalize(traj: Trajectory) -> Trajectory:
    """inverse of `normalize_origin`, back into the raw agent frame"""
    if traj.frame != "normalized" or traj.meta.origin is None:
        return traj
    poses = denormalize_poses(traj.poses, traj.meta.origin, traj.meta.heading_aligned)
    meta = traj.meta.model_copy(update={"origin": None, "heading_aligned": True})
    return Trajectory(poses=poses, frame="agent_raw", meta=meta)


def arc_stations(xz: np.ndarray) -> np.ndarray:
    """cumulative xz arc length at every waypoint"""
    steps = np.linalg.norm(np.diff(xz, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def arc_length(traj_or_xz) -> float:
    xz = traj_or_xz.xz if isinstance(traj_or_xz, Trajectory) else np.asarray(traj_or_xz)
    return float(arc_stations(xz)[-1])


def turning_angle(traj_or_xz) -> float:
    """sum of absolute heading changes between consecutive non-zero steps"""
    xz = traj_or_xz.xz if isinstance(traj_or_xz, Trajectory) else np.asarray(traj_or_xz)
    steps = np.diff(xz, axis=0)
    steps = steps[np.linalg.norm(steps, axis=1) > ZERO_STEP]
    if len(steps) < 2:
        return 0.0
    angles = np.arctan2(steps[:, 0], steps[:, 1])
    return float(np.sum(np.abs(wrap_angle(np.diff(angles)))))


def interpolate_polyline(
    xz: np.ndarray, values: np.ndarray, stations: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """points (and per-point values) at arc-length `stations` along the xz path"""
    arc = arc_stations(xz)
    keep = np.r_[True, np.diff(arc) > ZERO_STEP]
    arc, xz, values = arc[keep], xz[keep], values[keep]
    if len(arc) == 1:
        n = len(stations)
        return np.repeat(xz, n, axis=0), np.repeat(values, n)
    s = np.clip(stations, 0.0, arc[-1])
    out = np.column_stack([np.interp(s, arc, xz[:, 0]), np.interp(s, arc, xz[:, 1])])
    return out, np.interp(s, arc, values)


def resample_at(traj: Trajectory, stations: Sequence[float]) -> Trajectory:
    """poses at the given arc-length stations, yaw recomputed from directions"""
    stations = np.asarray(stations, dtype=float)
    if len(stations) < 2:
        raise DomainError("need at least 2 stations")
    xz, y = interpolate_polyline(traj.xz, traj.poses[:, 1], stations)
    if stations[0] <= 0.0:
        xz[0], y[0] = traj.xz[0], traj.poses[0, 1]
    if stations[-1] >= arc_length(traj):
        xz[-1], y[-1] = traj.xz[-1], traj.poses[-1, 1]
    poses = _assemble(xz, y, float(traj.poses[0, 3]))
    if traj.frame == "normalized" and traj.meta.heading_aligned and stations[0] <= 0.0:
        poses[0, 3] = traj.poses[0, 3]
    return Trajectory(
        poses=poses,
        frame=traj.frame,
        meta=traj.meta.model_copy(update={"resampled_to": len(stations)}),
    )


def resample(traj: Trajectory, n: int = DEFAULT_RESAMPLE_N) -> Trajectory:
    """`n` poses at arc-length-uniform stations, endpoints kept exactly"""
    if n < 2:
        raise DomainError(f"resample length must be >= 2, got {n}")
    return resample_at(traj, np.linspace(0.0, arc_length(traj), n))


def chaikin(xz: np.ndarray, iterations: int = CHAIKIN_ITERATIONS) -> np.ndarray:
    """corner cutting with pinned endpoints"""
    points = np.asarray(xz, dtype=float)
    for _ in range(iterations):
        if len(points) < 3:
            break
        a, b = points[:-1], points[1:]
        q = 0.75 * a + 0.25 * b
        r = 0.25 * a + 0.75 * b
        cut = np.empty((2 * len(a), 2))
        cut[0::2], cut[1::2] = q, r
        points = np.vstack([points[:1], cut[1:-1], points[-1:]])
    return points


def _grid_frame_xz(traj: Trajectory, xz: np.ndarray) -> np.ndarray:
    if traj.frame != "normalized" or traj.meta.origin is None:
        return xz
    ox, _, oz, oyaw = traj.meta.origin
    rotation = oyaw if traj.meta.heading_aligned else 0.0
    return from_heading_frame(xz, rotation) + np.array([ox, oz])


def _colliding_segments(grid: OccupancyGrid, xz: np.ndarray) -> np.ndarray:
    return np.array(
        [segment_collides(grid, a, b) for a, b in zip(xz[:-1], xz[1:])], dtype=bool
    )


def smooth(
    traj: Trajectory,
    grid: Optional[OccupancyGrid] = None,
    iterations: int = CHAIKIN_ITERATIONS,
) -> Trajectory:
    """
    Chaikin-smoothed trajectory with the same pose count, sampled on the smoothed
    curve at the original arc-length fractions. With a grid, smoothed segments that
    cross an Occupied cell revert to the original waypoints.
    """
    if len(traj) < 3:
        raise DomainError("smoothing needs at least 3 poses")
    xz = traj.xz
    original_len = arc_length(xz)
    curve = chaikin(xz, iterations)
    if original_len > ZERO_STEP:
        fractions = arc_stations(xz) / original_len
        smoothed, _ = interpolate_polyline(
            curve, np.zeros(len(curve)), fractions * arc_length(curve)
        )
    else:
        smoothed = xz.copy()
    smoothed[0], smoothed[-1] = xz[0], xz[-1]

    if grid is not None:
        smoothed = _revert_collisions(traj, grid, xz, smoothed)
    if turning_angle(smoothed) > turning_angle(xz) + 1e-12:
        logger.debug("smoothing would add turning after reverts, keeping input")
        smoothed = xz.copy()

    poses = _assemble(smoothed, traj.poses[:, 1], float(traj.poses[0, 3]))
    poses[0, :3] = traj.poses[0, :3]
    poses[-1, :3] = traj.poses[-1, :3]
    if traj.frame == "normalized" and traj.meta.heading_aligned:
        poses[0, 3] = traj.poses[0, 3]
    return Trajectory(
        poses=poses,
        frame=traj.frame,
        meta=traj.meta.model_copy(update={"smoothed": True}),
    )


def _revert_collisions(
    traj: Trajectory, grid: OccupancyGrid, xz: np.ndarray, smoothed: np.ndarray
) -> np.ndarray:
    reverted = np.all(smoothed == xz, axis=1)
    while True:
        hits = _colliding_segments(grid, _grid_frame_xz(traj, smoothed))
        pending = hits & ~(reverted[:-1] & reverted[1:])
        if not pending.any():
            return smoothed
        for i in np.flatnonzero(pending):
            smoothed[i], smoothed[i + 1] = xz[i], xz[i + 1]
            reverted[i] = reverted[i + 1] = True
        logger.debug("reverted %d colliding smoothed segments", pending.sum())


def path_collides(traj: Trajectory, grid: OccupancyGrid) -> np.ndarray:
    """per-segment collision flags of the trajectory against `grid`"""
    return _colliding_segments(grid, _grid_frame_xz(traj, traj.xz))

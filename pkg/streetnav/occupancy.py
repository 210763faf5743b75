"""
Ground/obstacle segmentation and the agent-centric local occupancy grid.

The agent frame follows the camera convention: the agent stands at x=0, z=0,
looks along +Z and heights are measured along up = -y. Cells are addressed as
``(col, row)`` with ``col`` along X and ``row`` along Z; the cell array itself is
indexed ``cells[row, col]``.
"""
import logging
import math
from enum import IntEnum
from typing import Iterator, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .camera import (
    WORLD_UP,
    CameraModel,
    RigidTransform,
    as_vector,
    invert_pose,
    unproject,
)
from .exceptions import DomainError
from .pointcloud import DEFAULT_K, DepthImage, PointCloud, normal_inconsistency

logger = logging.getLogger(__name__)

GRID_COLS = 50
GRID_ROWS = 50
RESOLUTION = 0.1
X_RANGE = (-2.5, 2.5)
Z_RANGE = (0.0, 5.0)
AGENT_CELL = (25, 0)

THETA_GROUND = 25.0
THETA_WALL = 65.0
INCONSISTENCY_DEG = 30.0
HEIGHT_BAND = (0.1, 2.0)

_FLOOR_EPS = 1e-9

Cell = Tuple[int, int]


class CellState(IntEnum):
    """cell states, valued as their PGM gray levels"""

    FREE = 0
    UNKNOWN = 128
    OCCUPIED = 255


class OccupancyGrid(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    cells: np.ndarray
    resolution: float = Field(default=RESOLUTION, gt=0)
    x_range: Tuple[float, float] = X_RANGE
    z_range: Tuple[float, float] = Z_RANGE
    agent_cell: Cell = AGENT_CELL
    target_cell: Cell = AGENT_CELL
    target_world: Optional[np.ndarray] = None

    @field_validator("cells", mode="before")
    @classmethod
    def _check_cells(cls, value) -> np.ndarray:
        cells = np.array(value, dtype=np.uint8)
        if cells.ndim != 2 or cells.size == 0:
            raise ValueError("cells must be a non-empty 2D array")
        allowed = np.isin(cells, [state.value for state in CellState])
        if not np.all(allowed):
            raise ValueError("cells hold values outside of Free/Unknown/Occupied")
        cells.setflags(write=False)
        return cells

    @field_validator("target_world", mode="before")
    @classmethod
    def _check_target_world(cls, value) -> Optional[np.ndarray]:
        if value is None:
            return None
        return as_vector(value, 3, "target_world")

    @model_validator(mode="after")
    def _check_geometry(self) -> "OccupancyGrid":
        x_span = self.x_range[1] - self.x_range[0]
        z_span = self.z_range[1] - self.z_range[0]
        if abs(self.cols * self.resolution - x_span) > 1e-9:
            raise ValueError(f"{self.cols} cols do not span x_range {self.x_range}")
        if abs(self.rows * self.resolution - z_span) > 1e-9:
            raise ValueError(f"{self.rows} rows do not span z_range {self.z_range}")
        for name in ("agent_cell", "target_cell"):
            if not self.contains(getattr(self, name)):
                raise ValueError(f"{name} {getattr(self, name)} outside of the grid")
        if self.state(self.agent_cell) != CellState.FREE:
            raise ValueError("agent cell must be Free")
        return self

    @classmethod
    def blank(
        cls,
        cols: int = GRID_COLS,
        rows: int = GRID_ROWS,
        fill: CellState = CellState.FREE,
        agent_cell: Optional[Cell] = None,
        target_cell: Optional[Cell] = None,
        resolution: float = RESOLUTION,
    ) -> "OccupancyGrid":
        """grid of a single state, centered on X like the perception range"""
        agent = agent_cell if agent_cell is not None else (cols // 2, 0)
        cells = np.full((rows, cols), fill.value, dtype=np.uint8)
        cells[agent[1], agent[0]] = CellState.FREE
        half = cols * resolution / 2
        return cls(
            cells=cells,
            resolution=resolution,
            x_range=(-half, half),
            z_range=(0.0, rows * resolution),
            agent_cell=agent,
            target_cell=target_cell if target_cell is not None else agent,
        )

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    def contains(self, cell: Cell) -> bool:
        col, row = cell
        return 0 <= col < self.cols and 0 <= row < self.rows

    def state(self, cell: Cell) -> CellState:
        return CellState(int(self.cells[cell[1], cell[0]]))

    def index(self, cell: Cell) -> int:
        """row-major index of `cell`"""
        return cell[1] * self.cols + cell[0]

    def cell_of(self, x: float, z: float) -> Optional[Cell]:
        """cell containing (x, z); the far edges of the range belong to the last cell"""
        x_min, x_max = self.x_range
        z_min, z_max = self.z_range
        if not (x_min <= x <= x_max and z_min <= z <= z_max):
            return None
        col = min(math.floor((x - x_min) / self.resolution + _FLOOR_EPS), self.cols - 1)
        row = min(math.floor((z - z_min) / self.resolution + _FLOOR_EPS), self.rows - 1)
        return col, row

    def center_of(self, cell: Cell) -> Tuple[float, float]:
        col, row = cell
        return (
            self.x_range[0] + (col + 0.5) * self.resolution,
            self.z_range[0] + (row + 0.5) * self.resolution,
        )

    def to_grid_units(self, x, z) -> Tuple[np.ndarray, np.ndarray]:
        return (
            (np.asarray(x, dtype=float) - self.x_range[0]) / self.resolution,
            (np.asarray(z, dtype=float) - self.z_range[0]) / self.resolution,
        )

    def blocked_mask(self, unknown_is_occupied: bool = False) -> np.ndarray:
        blocked = self.cells == CellState.OCCUPIED
        if unknown_is_occupied:
            blocked |= self.cells == CellState.UNKNOWN
        return blocked

    def with_cells(self, cells: np.ndarray) -> "OccupancyGrid":
        """copy with new cell states, agent (and target) cells forced Free"""
        cells = np.array(cells, dtype=np.uint8)
        cells[self.agent_cell[1], self.agent_cell[0]] = CellState.FREE
        cells[self.target_cell[1], self.target_cell[0]] = CellState.FREE
        return self.model_copy(update={"cells": _frozen(cells)})

    def with_target(
        self, cell: Cell, target_world: Optional[np.ndarray] = None
    ) -> "OccupancyGrid":
        cells = np.array(self.cells)
        cells[cell[1], cell[0]] = CellState.FREE
        update = {"cells": _frozen(cells), "target_cell": cell}
        if target_world is not None:
            update["target_world"] = as_vector(target_world, 3, "target_world")
        return self.model_copy(update=update)

    def crop(self, center: Cell, radius: int) -> np.ndarray:
        """(2r+1)x(2r+1) window around `center`, Unknown outside of the grid"""
        size = 2 * radius + 1
        window = np.full((size, size), CellState.UNKNOWN.value, dtype=np.uint8)
        col, row = center
        r0, r1 = max(row - radius, 0), min(row + radius + 1, self.rows)
        c0, c1 = max(col - radius, 0), min(col + radius + 1, self.cols)
        if r0 < r1 and c0 < c1:
            window[
                r0 - row + radius : r1 - row + radius,
                c0 - col + radius : c1 - col + radius,
            ] = self.cells[r0:r1, c0:c1]
        return window


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


class Segmentation(BaseModel):
    model_config = ConfigDict(frozen=True)

    ground_indices: Tuple[int, ...]
    obstacle_indices: Tuple[int, ...]

    @model_validator(mode="after")
    def _check_disjoint(self) -> "Segmentation":
        if set(self.ground_indices) & set(self.obstacle_indices):
            raise ValueError("ground and obstacle indices must be disjoint")
        return self


def angle_to(vectors: np.ndarray, axis: np.ndarray) -> np.ndarray:
    """angle in degrees between each row of `vectors` and the unit `axis`"""
    cosines = np.clip(vectors @ axis, -1.0, 1.0)
    return np.degrees(np.arccos(cosines))


def segment_cloud(
    cloud: PointCloud,
    up=WORLD_UP,
    theta_ground: float = THETA_GROUND,
    theta_wall: float = THETA_WALL,
    inconsistency_deg: Optional[float] = INCONSISTENCY_DEG,
    k: int = DEFAULT_K,
) -> Segmentation:
    """
    Ground: normal within `theta_ground` of up. Obstacle: normal more than
    `theta_wall` off up, or a neighborhood whose normals deviate on average by more
    than `inconsistency_deg`. Everything else stays unclassified.
    """
    if cloud.normals is None:
        raise DomainError("segmentation needs a cloud with normals")
    if not 0 < theta_ground < 90:
        raise DomainError(f"theta_ground must be in (0, 90), got {theta_ground}")
    up = as_vector(up, 3, "up")
    up = up / np.linalg.norm(up)
    angles = angle_to(cloud.normals, up)
    ground = angles <= theta_ground
    obstacle = angles > theta_wall
    if inconsistency_deg is not None and len(cloud) > k:
        obstacle |= normal_inconsistency(cloud, k) > inconsistency_deg
    obstacle &= ~ground
    return Segmentation(
        ground_indices=tuple(int(i) for i in np.flatnonzero(ground)),
        obstacle_indices=tuple(int(i) for i in np.flatnonzero(obstacle)),
    )


def to_agent_frame(points: np.ndarray, agent_pose: RigidTransform) -> np.ndarray:
    """world points -> agent frame (x right, height up, z forward)"""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    local = invert_pose(agent_pose).apply(points)
    return np.stack([local[:, 0], -local[:, 1], local[:, 2]], axis=1)


def _cells_of(
    grid: OccupancyGrid, xs: np.ndarray, zs: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    gx, gz = grid.to_grid_units(xs, zs)
    inside = (
        (xs >= grid.x_range[0])
        & (xs <= grid.x_range[1])
        & (zs >= grid.z_range[0])
        & (zs <= grid.z_range[1])
    )
    cols = np.minimum(np.floor(gx + _FLOOR_EPS), grid.cols - 1).astype(int)
    rows = np.minimum(np.floor(gz + _FLOOR_EPS), grid.rows - 1).astype(int)
    return cols, rows, inside


def ground_heights(
    cloud: PointCloud, seg: Segmentation, agent_pose: RigidTransform
) -> np.ndarray:
    """(rows, cols) median agent-frame ground height per cell, NaN where unseen"""
    grid = OccupancyGrid.blank()
    heights = np.full((grid.rows, grid.cols), np.nan)
    idx = np.array(seg.ground_indices, dtype=int)
    if idx.size == 0:
        return heights
    local = to_agent_frame(cloud.points[idx], agent_pose)
    cols, rows, inside = _cells_of(grid, local[:, 0], local[:, 2])
    flat = rows[inside] * grid.cols + cols[inside]
    values = local[inside, 1]
    order = np.lexsort((values, flat))
    flat, values = flat[order], values[order]
    starts = np.flatnonzero(np.r_[True, flat[1:] != flat[:-1]])
    for start, stop in zip(starts, np.r_[starts[1:], len(flat)]):
        heights.flat[flat[start]] = np.median(values[start:stop])
    return heights


def build_grid(
    cloud: PointCloud,
    seg: Segmentation,
    agent_pose: RigidTransform,
    target_world,
    height_band: Tuple[float, float] = HEIGHT_BAND,
) -> OccupancyGrid:
    """
    Projects the segmented cloud onto the agent-centric X-Z grid. Obstacle points
    within `height_band` above the local ground mark their cell Occupied, ground
    points mark Free where not Occupied, all other cells stay Unknown.
    """
    grid = OccupancyGrid.blank(fill=CellState.UNKNOWN, agent_cell=AGENT_CELL)
    cells = np.array(grid.cells)
    heights = ground_heights(cloud, seg, agent_pose)
    seen = heights[np.isfinite(heights)]
    fallback = float(np.median(seen)) if seen.size else 0.0

    ground_idx = np.array(seg.ground_indices, dtype=int)
    if ground_idx.size:
        local = to_agent_frame(cloud.points[ground_idx], agent_pose)
        cols, rows, inside = _cells_of(grid, local[:, 0], local[:, 2])
        cells[rows[inside], cols[inside]] = CellState.FREE

    obstacle_idx = np.array(seg.obstacle_indices, dtype=int)
    if obstacle_idx.size:
        local = to_agent_frame(cloud.points[obstacle_idx], agent_pose)
        cols, rows, inside = _cells_of(grid, local[:, 0], local[:, 2])
        cols, rows, local = cols[inside], rows[inside], local[inside]
        reference = heights[rows, cols]
        reference = np.where(np.isfinite(reference), reference, fallback)
        above = local[:, 1] - reference
        in_band = (above >= height_band[0]) & (above <= height_band[1])
        cells[rows[in_band], cols[in_band]] = CellState.OCCUPIED
        logger.debug("%d of %d obstacle points in band", in_band.sum(), len(in_band))

    cells[grid.agent_cell[1], grid.agent_cell[0]] = CellState.FREE
    grid = grid.model_copy(update={"cells": _frozen(cells)})
    target_world = as_vector(target_world, 3, "target_world")
    target_local = to_agent_frame(target_world, agent_pose)
    target = anchor_target(grid, target_local[0])
    return grid.with_target(target, target_world)


def nearest_free(grid: OccupancyGrid, cell: Cell) -> Cell:
    """nearest Free cell by Euclidean cell distance, ties: smaller row, smaller col"""
    rows, cols = np.nonzero(grid.cells == CellState.FREE)
    dist2 = (cols - cell[0]) ** 2 + (rows - cell[1]) ** 2
    best = np.lexsort((cols, rows, dist2))[0]
    return int(cols[best]), int(rows[best])


def anchor_target(grid: OccupancyGrid, target_local) -> Cell:
    """
    cell of an agent-frame target; out-of-range targets are clamped onto the
    nearest edge (the far row for targets beyond the range), Occupied results are
    replaced by the nearest Free cell
    """
    x, _, z = as_vector(target_local, 3, "target")
    x = min(max(x, grid.x_range[0]), grid.x_range[1])
    z = min(max(z, grid.z_range[0]), grid.z_range[1])
    cell = grid.cell_of(x, z)
    if grid.state(cell) == CellState.OCCUPIED:
        cell = nearest_free(grid, cell)
        logger.debug("target anchored on occupied cell, moved to %s", cell)
    return cell


def target_from_bbox(bbox, depth: DepthImage, model: CameraModel) -> np.ndarray:
    """
    world point of a bounding-boxed target: the box center pixel unprojected at the
    median valid depth inside the box
    """
    x0 = int(np.floor((bbox.cx - bbox.w / 2) * depth.width))
    x1 = int(np.ceil((bbox.cx + bbox.w / 2) * depth.width))
    y0 = int(np.floor((bbox.cy - bbox.h / 2) * depth.height))
    y1 = int(np.ceil((bbox.cy + bbox.h / 2) * depth.height))
    window = depth.depth[max(y0, 0) : max(y1, 0), max(x0, 0) : max(x1, 0)]
    valid = window[window > 0]
    if valid.size == 0:
        raise DomainError("no valid depth inside the target bounding box")
    u = min(bbox.cx * depth.width, np.nextafter(model.width, 0))
    v = min(bbox.cy * depth.height, np.nextafter(model.height, 0))
    return unproject(model, u, v, float(np.median(valid)))


def _line_crossings(g0: float, d: float) -> List[float]:
    if abs(d) < 1e-12:
        return []
    lo, hi = sorted((g0, g0 + d))
    first = math.ceil(lo - _FLOOR_EPS)
    last = math.floor(hi + _FLOOR_EPS)
    return [(k - g0) / d for k in range(first, last + 1)]


def _on_line(g: float) -> bool:
    return abs(g - round(g)) < _FLOOR_EPS


def _pieces(grid: OccupancyGrid, p0, p1):
    """
    the segment p0-p1 cut at every grid line it crosses, as grid-unit
    ``(start, mid, end)`` points per piece; a zero-length segment is one piece
    """
    (gx0, gx1), (gz0, gz1) = grid.to_grid_units([p0[0], p1[0]], [p0[1], p1[1]])
    start, delta = np.array([gx0, gz0]), np.array([gx1 - gx0, gz1 - gz0])
    crossings = _line_crossings(gx0, delta[0]) + _line_crossings(gz0, delta[1])
    ts = sorted(min(max(t, 0.0), 1.0) for t in [0.0, 1.0] + crossings)
    cuts = [ts[0]]
    for t in ts[1:]:
        if t - cuts[-1] > 1e-12:
            cuts.append(t)
    if len(cuts) == 1:
        cuts.append(cuts[0])
    return [
        (start + ta * delta, start + 0.5 * (ta + tb) * delta, start + tb * delta)
        for ta, tb in zip(cuts[:-1], cuts[1:])
    ]


def supercover(grid: OccupancyGrid, p0, p1) -> List[Cell]:
    """
    every in-grid cell whose open interior the segment p0-p1 enters, given as
    (x, z) in the grid frame; touching an edge or a corner does not count
    """
    cells = set()
    for _, (gx, gz), _ in _pieces(grid, p0, p1):
        if _on_line(gx) or _on_line(gz):
            continue
        cell = (math.floor(gx), math.floor(gz))
        if grid.contains(cell):
            cells.add(cell)
    return sorted(cells, key=grid.index)


def _occupied(grid: OccupancyGrid, cell: Cell) -> bool:
    return grid.contains(cell) and grid.state(cell) == CellState.OCCUPIED


def _pinched(grid: OccupancyGrid, p0, p1) -> bool:
    """
    true when the segment squeezes between two Occupied cells without entering
    either: along their shared edge, or diagonally through their shared corner
    """
    pieces = _pieces(grid, p0, p1)
    for _, (gx, gz), _ in pieces:
        if _on_line(gx) and not _on_line(gz):
            col, row = int(round(gx)), math.floor(gz)
            if _occupied(grid, (col - 1, row)) and _occupied(grid, (col, row)):
                return True
        if _on_line(gz) and not _on_line(gx):
            col, row = math.floor(gx), int(round(gz))
            if _occupied(grid, (col, row - 1)) and _occupied(grid, (col, row)):
                return True
    direction = pieces[-1][2] - pieces[0][0]
    if not np.all(np.abs(direction) > 1e-12):
        return False
    sx, sz = int(np.sign(direction[0])), int(np.sign(direction[1]))
    for gx, gz in [pieces[0][0]] + [end for _, _, end in pieces]:
        if not (_on_line(gx) and _on_line(gz)):
            continue
        col, row = int(round(gx)), int(round(gz))
        # the two cells beside the corner that the segment does not enter
        flank_a = (col if sx > 0 else col - 1, row - 1 if sz > 0 else row)
        flank_b = (col - 1 if sx > 0 else col, row if sz > 0 else row - 1)
        if _occupied(grid, flank_a) and _occupied(grid, flank_b):
            return True
    return False


def segment_collides(grid: OccupancyGrid, p0, p1) -> bool:
    """
    true when p0-p1 enters an Occupied cell or squeezes between two Occupied
    cells that only share an edge or a corner with the segment
    """
    if any(_occupied(grid, cell) for cell in supercover(grid, p0, p1)):
        return True
    return _pinched(grid, p0, p1)


def iter_cells(grid: OccupancyGrid) -> Iterator[Cell]:
    for row in range(grid.rows):
        for col in range(grid.cols):
            yield col, row

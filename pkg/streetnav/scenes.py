"""
Bundled synthetic data: a street-front scene rendered analytically (floor plane
plus a frontal wall with an entrance gap) and random solvable planning episodes.
"""
import logging
from pathlib import Path
from typing import List, NamedTuple, Optional

import numpy as np

from .camera import CameraModel, RigidTransform
from .converters import write_camera, write_flo, write_json, write_pfm, write_ppm
from .evalsim import Episode, episode_from_path
from .flowmask import FlowField
from .occupancy import AGENT_CELL, CellState, OccupancyGrid
from .planner import astar, inflate_obstacles
from .pointcloud import DepthImage
from .seeding import substream

logger = logging.getLogger(__name__)

SCENE_CAMERA = dict(fx=120.0, fy=120.0, cx=160.0, cy=120.0, width=320, height=240)
CAMERA_HEIGHT = 1.4
WALL_Z = 2.0
WALL_HEIGHT = 3.0
GAP_HALF_WIDTH = 0.5
MAX_DEPTH = 10.0
TARGET_WORLD = (0.0, CAMERA_HEIGHT, 6.0)
FLOOR_COLOR = (110, 110, 115)
WALL_COLOR = (170, 85, 60)
FLOW_SCALE = 0.25

INSTRUCTIONS = (
    "Walk to the entrance ahead and go inside.",
    "Head through the doorway in front of you.",
    "Go straight to the building entrance.",
    "Find the door and enter the building.",
)


class SyntheticScene(NamedTuple):
    camera: CameraModel
    depth: DepthImage
    image: np.ndarray
    flow: FlowField
    target_world: np.ndarray


def synthetic_scene(
    gap_half_width: Optional[float] = GAP_HALF_WIDTH,
    wall_z: float = WALL_Z,
    wall_height: float = WALL_HEIGHT,
    pose: Optional[RigidTransform] = None,
) -> SyntheticScene:
    """
    Depth through every pixel center of a camera 1.4 m above a flat floor, facing
    a wall at `wall_z` with an opening of |x| < `gap_half_width` (a solid wall
    for None). Pixels that see nothing within 10 m have depth 0. The flow is the
    radial expansion of a small forward step.
    """
    camera = CameraModel(**SCENE_CAMERA, pose=pose or RigidTransform.identity())
    cols = np.arange(camera.width) + 0.5
    rows = np.arange(camera.height) + 0.5
    uu, vv = np.meshgrid(cols, rows)
    ray_x = (uu - camera.cx) / camera.fx
    ray_y = (vv - camera.cy) / camera.fy

    with np.errstate(divide="ignore", invalid="ignore"):
        floor_z = np.where(ray_y > 0, CAMERA_HEIGHT / ray_y, np.inf)
    wall_hit = (ray_y * wall_z <= CAMERA_HEIGHT) & (
        ray_y * wall_z >= CAMERA_HEIGHT - wall_height
    )
    if gap_half_width is not None:
        wall_hit &= np.abs(ray_x * wall_z) >= gap_half_width
    wall_depth = np.where(wall_hit, wall_z, np.inf)

    depth = np.minimum(floor_z, wall_depth)
    on_wall = wall_depth <= floor_z
    depth = np.where(depth <= MAX_DEPTH, depth, 0.0)

    image = np.zeros((camera.height, camera.width, 3), dtype=np.uint8)
    image[(depth > 0) & ~on_wall] = FLOOR_COLOR
    image[(depth > 0) & on_wall] = WALL_COLOR

    inverse = np.divide(FLOW_SCALE, depth, out=np.zeros_like(depth), where=depth > 0)
    flow = FlowField(
        width=camera.width,
        height=camera.height,
        u=(uu - camera.cx) * inverse,
        v=(vv - camera.cy) * inverse,
    )
    target = camera.pose.apply(np.array(TARGET_WORLD))
    return SyntheticScene(
        camera=camera,
        depth=DepthImage.from_array(depth),
        image=image,
        flow=flow,
        target_world=target,
    )


def write_scene(out_dir: Path, scene: SyntheticScene) -> dict:
    """writes the scene files and returns their manifest entry (without id)"""
    out_dir = Path(out_dir)
    write_camera(out_dir / "camera.json", scene.camera)
    write_pfm(out_dir / "depth.pfm", scene.depth.depth)
    write_ppm(out_dir / "image.ppm", scene.image)
    write_flo(out_dir / "flow" / "frame_0000.flo", scene.flow)
    return {
        "depth_file": f"{out_dir.name}/depth.pfm",
        "camera_file": f"{out_dir.name}/camera.json",
        "image_file": f"{out_dir.name}/image.ppm",
        "flow_dir": f"{out_dir.name}/flow",
    }


def write_bundled_manifest(out: Path) -> Path:
    """
    Materializes the bundled scenes under `out` and writes ``manifest.json``:
    an open entrance with a world target, the same scene with a bounding-box
    target and a walled-off scene that has no path.
    """
    out = Path(out)
    entries = []
    for entry_id, gap, extra in (
        ("entrance", GAP_HALF_WIDTH, {"target_world": list(TARGET_WORLD)}),
        (
            "entrance_bbox",
            GAP_HALF_WIDTH,
            {"target_bbox": {"cx": 0.5, "cy": 0.75, "w": 0.1, "h": 0.1}},
        ),
        ("blocked", None, {"target_world": list(TARGET_WORLD)}),
    ):
        files = write_scene(out / entry_id, synthetic_scene(gap_half_width=gap))
        entries.append(
            {"id": entry_id, "instruction": INSTRUCTIONS[0], **files, **extra}
        )
    return write_json(out / "manifest.json", {"entries": entries})


def _random_grid(rng: np.random.Generator, target: tuple) -> OccupancyGrid:
    grid = OccupancyGrid.blank(agent_cell=AGENT_CELL)
    cells = np.array(grid.cells)
    for _ in range(int(rng.integers(3, 9))):
        width, depth = (int(v) for v in rng.integers(2, 9, size=2))
        col = int(rng.integers(0, grid.cols - width + 1))
        row = int(rng.integers(4, grid.rows - depth + 1))
        cells[row : row + depth, col : col + width] = CellState.OCCUPIED
    # keep the surroundings of agent and target open
    for c, r in (AGENT_CELL, target):
        cells[max(r - 2, 0) : r + 3, max(c - 2, 0) : c + 3] = CellState.FREE
    return grid.with_target(target).with_cells(cells)


def synthetic_episodes(
    n: int, seed: int, inflation_radius: int = 1, max_steps: int = 100
) -> List[Episode]:
    """
    `n` solvable episodes on random 50x50 grids; ground truth is the A* path on
    the inflated grid, collisions are judged against the raw grid
    """
    episodes = []
    for index in range(n):
        rng = substream(seed, f"episode/{index}")
        while True:
            target = (int(rng.integers(5, 45)), int(rng.integers(15, 50)))
            grid = _random_grid(rng, target)
            path = astar(inflate_obstacles(grid, inflation_radius))
            if path is not None and len(path.cells) >= 2:
                break
        episodes.append(
            episode_from_path(
                grid,
                path,
                instruction=INSTRUCTIONS[index % len(INSTRUCTIONS)],
                episode_id=f"ep{index:04d}",
                max_steps=max_steps,
            )
        )
    logger.debug("generated %d synthetic episodes", n)
    return episodes

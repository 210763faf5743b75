from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pytest
from streetnav.camera import CameraModel, RigidTransform, look_yaw
from streetnav.occupancy import CellState, OccupancyGrid
from streetnav.scenes import SyntheticScene, synthetic_scene, write_bundled_manifest


@pytest.fixture
def camera() -> CameraModel:
    return CameraModel(fx=100.0, fy=110.0, cx=32.0, cy=24.0, width=64, height=48)


@pytest.fixture
def posed_camera(camera) -> CameraModel:
    return camera.with_pose(look_yaw(0.4, [0.3, -1.2, 0.8]))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene() -> SyntheticScene:
    return synthetic_scene()


@pytest.fixture(scope="session")
def blocked_scene() -> SyntheticScene:
    return synthetic_scene(gap_half_width=None)


@pytest.fixture
def make_grid() -> Callable[..., OccupancyGrid]:
    """grid with the given (col, row) cells Occupied and an optional target"""

    def _make(
        occupied: Sequence = (),
        target: Optional[tuple] = None,
        cols: int = 50,
        rows: int = 50,
        agent_cell: Optional[tuple] = None,
        unknown: Sequence = (),
    ) -> OccupancyGrid:
        grid = OccupancyGrid.blank(cols=cols, rows=rows, agent_cell=agent_cell)
        cells = np.array(grid.cells)
        for c, r in unknown:
            cells[r, c] = CellState.UNKNOWN
        for c, r in occupied:
            cells[r, c] = CellState.OCCUPIED
        if target is not None:
            grid = grid.with_target(target)
        return grid.with_cells(cells)

    return _make


@pytest.fixture(scope="session")
def bundled_manifest(tmp_path_factory) -> Path:
    return write_bundled_manifest(tmp_path_factory.mktemp("bundled"))


@pytest.fixture
def identity() -> RigidTransform:
    return RigidTransform.identity()

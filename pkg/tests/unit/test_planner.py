import math
from typing import NamedTuple, Optional

import numpy as np
import pytest
from pydantic import ValidationError
from streetnav.exceptions import DomainError
from streetnav.occupancy import CellState, OccupancyGrid
from streetnav.planner import (
    SQRT2,
    GridPath,
    astar,
    dijkstra_oracle,
    distance_field,
    inflate_obstacles,
    octile,
    path_cost,
    validate_path,
)


def random_grid(
    rng: np.random.Generator, cols: int, rows: int, obstacles: int
) -> OccupancyGrid:
    grid = OccupancyGrid.blank(cols=cols, rows=rows)
    free = [i for i in range(cols * rows) if i != grid.index(grid.agent_cell)]
    picks = rng.permutation(free)
    target = int(picks[0])
    cells = np.array(grid.cells)
    for i in picks[1 : obstacles + 1]:
        cells[i // cols, i % cols] = CellState.OCCUPIED
    return grid.with_target((target % cols, target // cols)).with_cells(cells)


class PlanParams(NamedTuple):
    target: tuple
    expected_cost: Optional[float]
    agent: tuple = (25, 0)
    occupied: tuple = ()


plan_test_cases = [
    pytest.param(
        PlanParams(target=(25, 20), expected_cost=20.0), id="straight free column"
    ),
    pytest.param(
        PlanParams(target=(10, 10), expected_cost=10 * SQRT2, agent=(0, 0)),
        id="pure diagonal",
    ),
    pytest.param(
        PlanParams(
            target=(25, 20),
            expected_cost=None,
            occupied=tuple((c, 10) for c in range(50)),
        ),
        id="full wall row",
    ),
    pytest.param(
        PlanParams(
            target=(1, 1), expected_cost=None, agent=(0, 0), occupied=((1, 0), (0, 1))
        ),
        id="diagonal squeeze between two blocked flanks",
    ),
    pytest.param(
        PlanParams(
            target=(1, 1), expected_cost=SQRT2, agent=(0, 0), occupied=((1, 0),)
        ),
        id="diagonal past a single blocked flank",
    ),
]


class TestAStar:
    @pytest.mark.parametrize("parameters", plan_test_cases)
    def test_examples(self, make_grid, parameters: PlanParams):
        grid = make_grid(
            occupied=parameters.occupied,
            target=parameters.target,
            agent_cell=parameters.agent,
        )
        for planner in (astar, dijkstra_oracle):
            path = planner(grid)
            if parameters.expected_cost is None:
                assert path is None
            else:
                assert path.cost == pytest.approx(parameters.expected_cost, abs=1e-12)
                validate_path(path, grid)

    def test_straight_column(self, make_grid):
        path = astar(make_grid(target=(25, 20)))
        assert path.cells == tuple((25, r) for r in range(21))
        assert path.straight_moves == 20
        assert path.diagonal_moves == 0

    def test_same_cell(self, make_grid):
        path = astar(make_grid())
        assert path.cells == ((25, 0),)
        assert path.cost == 0.0

    def test_deterministic(self, rng):
        grid = random_grid(rng, 50, 50, 500)
        assert astar(grid) == astar(grid)

    def test_unknown_cells(self, make_grid):
        grid = make_grid(target=(25, 20), unknown=[(c, 10) for c in range(50)])
        assert astar(grid).cost == 20.0
        assert astar(grid, unknown_is_occupied=True) is None

    def test_exhaustive_small_grids(self, rng):
        solved = 0
        for instance in range(10_000):
            grid = random_grid(rng, 8, 8, instance % 13)
            fast, slow = astar(grid), dijkstra_oracle(grid)
            assert (fast is None) == (slow is None)
            if fast is not None:
                assert fast.cost == slow.cost
                validate_path(fast, grid)
                solved += 1
        assert solved > 8_000

    def test_random_large_grids(self, rng):
        for _ in range(200):
            grid = random_grid(rng, 50, 50, 500)
            fast, slow = astar(grid), dijkstra_oracle(grid)
            assert (fast is None) == (slow is None)
            if fast is not None:
                assert fast.cost == slow.cost
                validate_path(fast, grid)

    def test_heuristic_is_admissible(self, rng):
        for _ in range(20):
            grid = random_grid(rng, 50, 50, 500)
            remaining = distance_field(grid, grid.target_cell)
            expanded = []
            astar(grid, on_expand=lambda cell, g, h: expanded.append((cell, h)))
            for (col, row), h in expanded:
                assert h <= remaining[row, col] + 1e-9


class TestHelpers:
    def test_octile(self):
        assert octile((0, 0), (3, 5)) == pytest.approx(3 * SQRT2 + 2)
        assert octile((2, 2), (2, 2)) == 0.0

    def test_path_cost(self):
        assert path_cost([(0, 0), (0, 1), (1, 2)]) == 1 + SQRT2

    def test_distance_field(self, make_grid):
        grid = make_grid(occupied=[(c, 10) for c in range(50)])
        dist = distance_field(grid, (25, 0))
        assert dist[5, 25] == 5.0
        assert math.isinf(dist[20, 25])


class TestGridPath:
    def test_rejects_jumps(self):
        with pytest.raises(ValidationError):
            GridPath(cells=((0, 0), (2, 0)), cost=2.0)

    def test_rejects_repeats(self):
        with pytest.raises(ValidationError):
            GridPath(cells=((0, 0), (0, 1), (0, 0)), cost=2.0)

    def test_validate_path_endpoints(self, make_grid):
        grid = make_grid(target=(25, 3))
        with pytest.raises(DomainError):
            validate_path(GridPath(cells=((25, 0), (25, 1)), cost=1.0), grid)

    def test_validate_path_obstacles(self, make_grid):
        grid = make_grid(target=(25, 2), occupied=[(25, 1)])
        with pytest.raises(DomainError):
            validate_path(GridPath(cells=((25, 0), (25, 1), (25, 2)), cost=2.0), grid)


class TestInflation:
    def test_radius_zero_is_identity(self, make_grid):
        grid = make_grid(occupied=[(10, 10)])
        assert inflate_obstacles(grid, 0) is grid

    def test_single_cell_grows_to_a_block(self, make_grid):
        grid = inflate_obstacles(make_grid(occupied=[(10, 10)]), 1)
        occupied = np.argwhere(grid.cells == CellState.OCCUPIED)
        assert sorted(map(tuple, occupied)) == [
            (r, c) for r in range(9, 12) for c in range(9, 12)
        ]

    def test_agent_and_target_stay_free(self, make_grid):
        grid = make_grid(occupied=[(24, 1), (30, 31)], target=(30, 30))
        inflated = inflate_obstacles(grid, 2)
        assert inflated.state((25, 0)) == CellState.FREE
        assert inflated.state((30, 30)) == CellState.FREE
        assert inflated.state((31, 30)) == CellState.OCCUPIED

    def test_monotone(self, rng):
        grid = random_grid(rng, 50, 50, 100)
        inflated = inflate_obstacles(grid, 1)
        before = grid.cells == CellState.OCCUPIED
        after = inflated.cells == CellState.OCCUPIED
        assert np.all(after[before])
        assert after.sum() >= before.sum()

    def test_negative_radius(self, make_grid):
        with pytest.raises(DomainError):
            inflate_obstacles(make_grid(), -1)

"""A* over the occupancy grid, with a Dijkstra reference and obstacle inflation."""
import heapq
import logging
import math
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.ndimage import binary_dilation

from .exceptions import DomainError
from .occupancy import Cell, CellState, OccupancyGrid

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
DEFAULT_INFLATION = 1

# (dcol, drow) in a fixed order; the order only affects which equal-cost
# neighbor gets pushed first, never the output thanks to the total ordering of keys
MOVES = [(0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)]

ExpandHook = Callable[[Cell, float, float], None]


class GridPath(BaseModel):
    model_config = ConfigDict(frozen=True)

    cells: Tuple[Cell, ...] = Field(min_length=1)
    cost: float = Field(ge=0)

    @model_validator(mode="after")
    def _check_cells(self) -> "GridPath":
        if len(set(self.cells)) != len(self.cells):
            raise ValueError("path visits a cell twice")
        for (c0, r0), (c1, r1) in zip(self.cells, self.cells[1:]):
            if max(abs(c1 - c0), abs(r1 - r0)) != 1:
                raise ValueError(f"cells {(c0, r0)} and {(c1, r1)} are not 8-adjacent")
        return self

    @property
    def straight_moves(self) -> int:
        return sum(
            1
            for a, b in zip(self.cells, self.cells[1:])
            if a[0] == b[0] or a[1] == b[1]
        )

    @property
    def diagonal_moves(self) -> int:
        return len(self.cells) - 1 - self.straight_moves


def path_cost(cells) -> float:
    """cost summed as counts so that equally long paths compare bitwise equal"""
    straight = sum(1 for a, b in zip(cells, cells[1:]) if a[0] == b[0] or a[1] == b[1])
    diagonal = len(cells) - 1 - straight
    return straight + diagonal * SQRT2


def octile(a: Cell, b: Cell) -> float:
    dx = abs(a[0] - b[0])
    dz = abs(a[1] - b[1])
    return (dx + dz) + (SQRT2 - 2.0) * min(dx, dz)


def neighbors(
    blocked: np.ndarray, cell: Cell
) -> List[Tuple[Cell, float]]:
    """8-connected moves, diagonals refused when both flanking cells are blocked"""
    rows, cols = blocked.shape
    col, row = cell
    result = []
    for dc, dr in MOVES:
        nc, nr = col + dc, row + dr
        if not (0 <= nc < cols and 0 <= nr < rows) or blocked[nr, nc]:
            continue
        if dc and dr:
            if blocked[row, nc] and blocked[nr, col]:
                continue
            result.append(((nc, nr), SQRT2))
        else:
            result.append(((nc, nr), 1.0))
    return result


def validate_path(path: GridPath, grid: OccupancyGrid) -> None:
    """raises DomainError unless `path` is a valid agent-to-target path on `grid`"""
    if path.cells[0] != grid.agent_cell or path.cells[-1] != grid.target_cell:
        raise DomainError("path does not connect agent and target cells")
    for cell in path.cells:
        if not grid.contains(cell) or grid.state(cell) == CellState.OCCUPIED:
            raise DomainError(f"path crosses blocked cell {cell}")


def _search(
    grid: OccupancyGrid,
    use_heuristic: bool,
    unknown_is_occupied: bool = False,
    on_expand: Optional[ExpandHook] = None,
) -> Optional[GridPath]:
    blocked = grid.blocked_mask(unknown_is_occupied)
    start, goal = grid.agent_cell, grid.target_cell
    for name, cell in (("agent", start), ("target", goal)):
        if blocked[cell[1], cell[0]]:
            raise DomainError(f"{name} cell {cell} is not traversable")

    def h(cell: Cell) -> float:
        return octile(cell, goal) if use_heuristic else 0.0

    # keys: (f, h, row-major index); rounding keeps float noise out of tie-breaks
    g_cost: Dict[Cell, float] = {start: 0.0}
    came_from: Dict[Cell, Cell] = {}
    closed = set()
    open_heap = [(round(h(start), 9), round(h(start), 9), grid.index(start), start)]
    while open_heap:
        _, _, _, current = heapq.heappop(open_heap)
        if current in closed:
            continue
        closed.add(current)
        if on_expand is not None:
            on_expand(current, g_cost[current], h(current))
        if current == goal:
            cells = [current]
            while cells[-1] in came_from:
                cells.append(came_from[cells[-1]])
            cells.reverse()
            return GridPath(cells=tuple(cells), cost=path_cost(cells))
        for nxt, step in neighbors(blocked, current):
            if nxt in closed:
                continue
            tentative = g_cost[current] + step
            if tentative < g_cost.get(nxt, math.inf) - 1e-12:
                g_cost[nxt] = tentative
                came_from[nxt] = current
                hn = h(nxt)
                heapq.heappush(
                    open_heap,
                    (round(tentative + hn, 9), round(hn, 9), grid.index(nxt), nxt),
                )
    logger.debug("no path from %s to %s", start, goal)
    return None


def astar(
    grid: OccupancyGrid,
    unknown_is_occupied: bool = False,
    on_expand: Optional[ExpandHook] = None,
) -> Optional[GridPath]:
    """
    minimum-cost 8-connected path from the agent cell to the target cell

    :param unknown_is_occupied: treat Unknown cells as obstacles
    :param on_expand: called with (cell, g, h) for every expanded node
    :return: the path, or None when the target is unreachable
    """
    return _search(grid, True, unknown_is_occupied, on_expand)


def dijkstra_oracle(
    grid: OccupancyGrid, unknown_is_occupied: bool = False
) -> Optional[GridPath]:
    return _search(grid, False, unknown_is_occupied)


def distance_field(
    grid: OccupancyGrid, source: Cell, unknown_is_occupied: bool = False
) -> np.ndarray:
    """(rows, cols) true path cost from every cell to `source`, inf if unreachable"""
    blocked = grid.blocked_mask(unknown_is_occupied)
    dist = np.full(blocked.shape, np.inf)
    dist[source[1], source[0]] = 0.0
    heap = [(0.0, grid.index(source), source)]
    while heap:
        d, _, cell = heapq.heappop(heap)
        if d > dist[cell[1], cell[0]]:
            continue
        for nxt, step in neighbors(blocked, cell):
            nd = d + step
            if nd < dist[nxt[1], nxt[0]] - 1e-12:
                dist[nxt[1], nxt[0]] = nd
                heapq.heappush(heap, (nd, grid.index(nxt), nxt))
    return dist


def inflate_obstacles(grid: OccupancyGrid, radius_cells: int) -> OccupancyGrid:
    """grows Occupied cells by a Chebyshev radius; agent and target stay Free"""
    if radius_cells < 0:
        raise DomainError(f"radius_cells must be >= 0, got {radius_cells}")
    if radius_cells == 0:
        return grid
    occupied = grid.cells == CellState.OCCUPIED
    size = 2 * radius_cells + 1
    grown = binary_dilation(occupied, structure=np.ones((size, size), dtype=bool))
    cells = np.where(grown, CellState.OCCUPIED.value, grid.cells).astype(np.uint8)
    return grid.with_cells(cells)

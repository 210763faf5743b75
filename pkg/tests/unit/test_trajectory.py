import math
from typing import NamedTuple

import numpy as np
import pytest
from pydantic import ValidationError
from streetnav.exceptions import DomainError
from streetnav.planner import GridPath, astar, inflate_obstacles
from streetnav.scenes import synthetic_episodes
from streetnav.trajectory import (
    Trajectory,
    arc_length,
    arc_stations,
    denormalize,
    headings,
    lift_path,
    normalize_origin,
    path_collides,
    resample,
    resample_at,
    smooth,
    turning_angle,
    wrap_angle,
)


def planar(xz, y=None) -> Trajectory:
    xz = np.asarray(xz, dtype=float)
    y = np.zeros(len(xz)) if y is None else y
    return Trajectory(poses=np.column_stack([xz[:, 0], y, xz[:, 1], np.zeros(len(xz))]))


def random_trajectory(rng, n: int = 12) -> Trajectory:
    poses = np.column_stack(
        [
            rng.uniform(-3, 3, n),
            rng.uniform(-0.5, 0.5, n),
            rng.uniform(0, 5, n),
            rng.uniform(-3, 3, n),
        ]
    )
    return Trajectory(poses=poses)


def grid_path(cells) -> GridPath:
    cells = tuple(cells)
    return GridPath(cells=cells, cost=float(len(cells) - 1))


class LiftParams(NamedTuple):
    cells: tuple
    expected_yaw: float


lift_test_cases = [
    pytest.param(LiftParams(cells=((25, 0), (25, 1)), expected_yaw=0.0), id="forward"),
    pytest.param(
        LiftParams(cells=((25, 0), (26, 0)), expected_yaw=math.pi / 2),
        id="lateral step toward +X",
    ),
    pytest.param(
        LiftParams(cells=((25, 0), (24, 0)), expected_yaw=-math.pi / 2),
        id="lateral step toward -X",
    ),
    pytest.param(
        LiftParams(cells=((25, 0), (26, 1)), expected_yaw=math.pi / 4),
        id="diagonal step",
    ),
]


class TestLiftPath:
    @pytest.mark.parametrize("parameters", lift_test_cases)
    def test_yaw(self, make_grid, parameters: LiftParams):
        traj = lift_path(grid_path(parameters.cells), make_grid())
        assert traj.poses[:, 3] == pytest.approx([parameters.expected_yaw] * 2)

    def test_straight_column(self, make_grid):
        traj = lift_path(grid_path((25, r) for r in range(21)), make_grid())
        assert traj.frame == "agent_raw"
        assert len(traj) == 21
        assert np.all(traj.poses[:, 3] == 0.0)
        assert traj.poses[-1, :3] == pytest.approx([0.05, 0.0, 2.05])

    def test_ground_heights(self, make_grid):
        heights = np.full((50, 50), -1.4)
        heights[1, 25] = np.nan
        traj = lift_path(grid_path((25, r) for r in range(3)), make_grid(), heights)
        assert list(traj.poses[:, 1]) == [-1.4, 0.0, -1.4]

    def test_single_cell(self, make_grid):
        with pytest.raises(DomainError):
            lift_path(grid_path([(25, 0)]), make_grid())


class TestTrajectoryModel:
    @pytest.mark.parametrize(
        "poses",
        [
            pytest.param([[0.0, 0.0, 0.0, 0.0]], id="single pose"),
            pytest.param([[0, 0, 0, 0], [0, 0, 1, 4.0]], id="yaw out of range"),
            pytest.param([[0, 0, 0, 0], [0, 0, np.nan, 0]], id="nan position"),
            pytest.param([[0, 0, 0], [0, 0, 1]], id="missing yaw"),
        ],
    )
    def test_invalid(self, poses):
        with pytest.raises(ValidationError):
            Trajectory(poses=poses)

    def test_normalized_must_start_at_origin(self):
        with pytest.raises(ValidationError):
            Trajectory(poses=[[1, 0, 0, 0], [1, 0, 1, 0]], frame="normalized")

    @pytest.mark.parametrize(
        "angle, expected",
        [
            pytest.param(math.pi, math.pi, id="pi stays"),
            pytest.param(-math.pi, math.pi, id="minus pi maps to pi"),
            pytest.param(1.5 * math.pi, -0.5 * math.pi, id="past pi"),
            pytest.param(0.3, 0.3, id="in range"),
        ],
    )
    def test_wrap_angle(self, angle, expected):
        assert wrap_angle(angle) == pytest.approx(expected)

    def test_zero_steps_carry_yaw_forward(self):
        yaws = headings(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [1.0, 0.0]]))
        assert yaws == pytest.approx([0.0, math.pi / 2, math.pi / 2, math.pi / 2])


class TestNormalizeOrigin:
    def test_isometry(self, rng):
        for _ in range(50):
            traj = random_trajectory(rng)
            norm = normalize_origin(traj)
            before = np.linalg.norm(
                traj.positions[:, None] - traj.positions[None], axis=-1
            )
            after = np.linalg.norm(
                norm.positions[:, None] - norm.positions[None], axis=-1
            )
            assert np.max(np.abs(before - after)) < 1e-9
            assert norm.frame == "normalized"
            assert np.max(np.abs(norm.poses[0])) < 1e-9

    def test_idempotent(self, rng):
        norm = normalize_origin(random_trajectory(rng))
        assert normalize_origin(norm) is norm

    def test_translation_only(self, rng):
        traj = random_trajectory(rng)
        norm = normalize_origin(traj, translation_only=True)
        assert np.allclose(norm.positions, traj.positions - traj.positions[0])
        assert np.array_equal(norm.poses[:, 3], traj.poses[:, 3])
        assert not norm.meta.heading_aligned

    @pytest.mark.parametrize("translation_only", [False, True])
    def test_denormalize_inverts(self, rng, translation_only):
        traj = random_trajectory(rng)
        back = denormalize(normalize_origin(traj, translation_only))
        assert back.frame == "agent_raw"
        assert np.allclose(back.positions, traj.positions, atol=1e-9)
        turn = wrap_angle(back.poses[:, 3] - traj.poses[:, 3])
        assert np.allclose(turn, 0.0, atol=1e-9)

    def test_heading_convention(self, rng):
        traj = resample(normalize_origin(random_trajectory(rng)), 30)
        # the first pose keeps the aligned yaw 0
        steps = np.diff(traj.xz, axis=0)[1:]
        for (dx, dz), yaw in zip(steps, traj.poses[1:-1, 3]):
            length = math.hypot(dx, dz)
            if length > 1e-9:
                assert (math.sin(yaw), math.cos(yaw)) == pytest.approx(
                    (dx / length, dz / length), abs=1e-9
                )


class TestResample:
    def test_uniform_split(self):
        traj = resample(planar([[0.0, 0.0], [0.0, 2.0]]), 5)
        assert list(traj.poses[:, 2]) == [0.0, 0.5, 1.0, 1.5, 2.0]
        assert traj.meta.resampled_to == 5

    def test_original_stations_reproduce_waypoints(self, rng):
        traj = random_trajectory(rng)
        again = resample_at(traj, arc_stations(traj.xz))
        assert np.allclose(again.xz, traj.xz, atol=1e-9)
        assert np.allclose(again.poses[:, 1], traj.poses[:, 1], atol=1e-9)

    def test_arc_length_kept_on_a_line(self):
        traj = planar([[0.0, 0.0], [0.3, 0.3], [1.0, 1.0], [1.2, 1.2]])
        expected = arc_length(traj)
        assert arc_length(resample(traj, 17)) == pytest.approx(expected, abs=1e-6)

    def test_round_trip_keeps_endpoints(self, rng):
        traj = random_trajectory(rng)
        back = resample(resample(traj, 40), len(traj))
        assert np.array_equal(back.positions[[0, -1]], traj.positions[[0, -1]])

    def test_heights_are_interpolated(self):
        traj = resample(planar([[0.0, 0.0], [0.0, 1.0]], y=[0.0, 1.0]), 3)
        assert list(traj.poses[:, 1]) == [0.0, 0.5, 1.0]

    def test_too_short(self):
        with pytest.raises(DomainError):
            resample(planar([[0.0, 0.0], [0.0, 1.0]]), 1)


class TestSmooth:
    def test_collinear_is_unchanged(self):
        traj = planar([[0.0, 0.0], [0.0, 1.0], [0.0, 3.0], [0.0, 3.5]])
        assert np.allclose(smooth(traj).poses, traj.poses, atol=1e-9)

    def test_corner_turns_less(self):
        traj = planar([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        smoothed = smooth(traj)
        assert turning_angle(smoothed) < turning_angle(traj)
        assert smoothed.meta.smoothed

    def test_endpoints_stay(self, rng):
        traj = random_trajectory(rng)
        smoothed = smooth(traj)
        assert np.array_equal(smoothed.positions[[0, -1]], traj.positions[[0, -1]])
        assert len(smoothed) == len(traj)

    def test_corner_next_to_an_obstacle(self, make_grid):
        grid = make_grid(occupied=[(26, 8)])
        traj = planar([[0.05, 0.05], [0.05, 1.05], [1.05, 1.05]])
        assert not path_collides(traj, grid).any()
        assert path_collides(smooth(traj), grid).any()
        assert not path_collides(smooth(traj, grid), grid).any()

    def test_normalized_input_checks_the_raw_grid(self, make_grid):
        grid = make_grid(occupied=[(26, 8)])
        traj = normalize_origin(planar([[0.05, 0.05], [0.05, 1.05], [1.05, 1.05]]))
        assert path_collides(smooth(traj), grid).any()
        assert not path_collides(smooth(traj, grid), grid).any()

    def test_annotated_random_scenes(self):
        for ep in synthetic_episodes(100, seed=5):
            planning = inflate_obstacles(ep.grid, 1)
            path = astar(planning)
            traj = resample(normalize_origin(lift_path(path, ep.grid)), 40)
            smoothed = smooth(traj, planning)
            assert turning_angle(smoothed) <= turning_angle(traj) + 1e-9
            added = path_collides(smoothed, planning) & ~path_collides(traj, planning)
            assert not added.any(), ep.episode_id

    def test_needs_three_poses(self):
        with pytest.raises(DomainError):
            smooth(planar([[0.0, 0.0], [0.0, 1.0]]))

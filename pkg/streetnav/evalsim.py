"""
Closed-loop waypoint-following evaluation.

An episode lives in the *episode frame*: the grid's agent frame shifted so that
the center of the agent cell is the origin. Policies see the agent pose, a local
crop of the occupancy grid and the instruction, and answer with the next
waypoints in the agent's current heading frame.
"""
import logging
import math
from collections import deque
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .exceptions import DomainError, ProtocolError
from .occupancy import OccupancyGrid, segment_collides
from .planner import GridPath
from .seeding import substream
from .trajectory import (
    Trajectory,
    from_heading_frame,
    interpolate_polyline,
    into_heading_frame,
    lift_path,
    normalize_origin,
)

logger = logging.getLogger(__name__)

HISTORY = 10
HORIZON = 5
MAX_STEPS = 100
REACH_RADIUS = 0.1
STOP_EPSILON = 1e-3
DEVIATION_SAMPLES = 100
CROP_RADIUS = 5
SR_RADII = (0.1, 0.2, 0.3)
GT_TOLERANCE = 0.05
# distances this close to a radius count as on it, and on it is outside
RADIUS_TOLERANCE = 1e-6

Outcome = Literal["reached", "max_steps", "collision", "stopped"]


class Episode(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    episode_id: str = ""
    grid: OccupancyGrid
    instruction: str = ""
    target_entrance: Tuple[float, float]
    gt_trajectory: Trajectory
    max_steps: int = Field(default=MAX_STEPS, gt=0)

    @model_validator(mode="after")
    def _check_ground_truth(self) -> "Episode":
        cell_center = np.subtract(
            self.grid.center_of(self.grid.target_cell), self.origin
        )
        end = self.gt_trajectory.xz[-1]
        if np.linalg.norm(end - cell_center) > GT_TOLERANCE:
            raise ValueError("ground truth does not end at the target cell")
        offset = np.subtract(self.target_entrance, cell_center)
        if np.linalg.norm(offset) > GT_TOLERANCE:
            raise ValueError("target_entrance is not inside the target cell")
        return self

    @property
    def origin(self) -> np.ndarray:
        """episode origin expressed in the grid frame"""
        return np.array(self.grid.center_of(self.grid.agent_cell))

    def to_grid_frame(self, xz) -> np.ndarray:
        return np.asarray(xz, dtype=float) + self.origin


def episode_from_path(
    grid: OccupancyGrid,
    path: GridPath,
    instruction: str = "",
    episode_id: str = "",
    ground_heights: Optional[np.ndarray] = None,
    max_steps: int = MAX_STEPS,
) -> Episode:
    """episode whose ground truth is `path` lifted into the episode frame"""
    gt = normalize_origin(lift_path(path, grid, ground_heights), translation_only=True)
    target = np.subtract(
        grid.center_of(grid.target_cell), grid.center_of(grid.agent_cell)
    )
    return Episode(
        episode_id=episode_id,
        grid=grid,
        instruction=instruction,
        target_entrance=(float(target[0]), float(target[1])),
        gt_trajectory=gt,
        max_steps=max_steps,
    )


class Observation(BaseModel):
    """
    agent pose (x, z, yaw) in the episode frame, the grid crop centred on the
    agent's cell, the step number and the count of waypoints executed so far
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pose: Tuple[float, float, float]
    crop: np.ndarray
    step: int = Field(ge=0)
    executed: int = Field(ge=0)


class PolicyInput(BaseModel):
    model_config = ConfigDict(frozen=True)

    instruction: str
    history: Tuple[Observation, ...] = Field(min_length=1)

    @property
    def current(self) -> Observation:
        return self.history[-1]


Policy = Callable[[PolicyInput], np.ndarray]


class Rollout(BaseModel):
    model_config = ConfigDict(frozen=True)

    episode_id: str = ""
    states: Tuple[Tuple[float, float, float], ...] = Field(min_length=1)
    outcome: Outcome

    @model_validator(mode="after")
    def _check_start(self) -> "Rollout":
        if self.states[0] != (0.0, 0.0, 0.0):
            raise ValueError("rollouts start at the episode origin")
        return self

    @property
    def final_xz(self) -> np.ndarray:
        x, z, _ = self.states[-1]
        return np.array([x, z])

    @property
    def xz(self) -> np.ndarray:
        return np.array([[x, z] for x, z, _ in self.states])


def observe(
    ep: Episode,
    pose: Tuple[float, float, float],
    step: int,
    executed: int,
    crop_radius: int = CROP_RADIUS,
) -> Observation:
    gx, gz = ep.to_grid_frame(pose[:2])
    col_units, row_units = ep.grid.to_grid_units(gx, gz)
    cell = (math.floor(col_units), math.floor(row_units))
    crop = ep.grid.crop(cell, crop_radius)
    crop.setflags(write=False)
    return Observation(pose=pose, crop=crop, step=step, executed=executed)


def within_radius(distance: float, radius: float) -> bool:
    """
    the one boundary rule for reaching a target and for success rates: strictly
    inside `radius`, so a state exactly one radius away is outside
    """
    return distance < radius - RADIUS_TOLERANCE


def local_to_episode(pose: Tuple[float, float, float], local) -> np.ndarray:
    """agent-frame waypoints (N, 2) into the episode frame"""
    x, z, yaw = pose
    local = np.asarray(local, dtype=float).reshape(-1, 2)
    return from_heading_frame(local, yaw) + [x, z]


def episode_to_local(pose: Tuple[float, float, float], points) -> np.ndarray:
    x, z, yaw = pose
    offsets = np.asarray(points, dtype=float).reshape(-1, 2) - [x, z]
    return into_heading_frame(offsets, yaw)


def run_episode(
    ep: Episode,
    policy: Policy,
    seed: Optional[int] = None,
    history: int = HISTORY,
    horizon: int = HORIZON,
    execute_all: bool = False,
    reach_radius: float = REACH_RADIUS,
    stop_epsilon: float = STOP_EPSILON,
    crop_radius: int = CROP_RADIUS,
) -> Rollout:
    """
    Receding-horizon loop. Each step the policy gets the last `history`
    observations and returns `horizon` waypoints; the agent turns toward the first
    (or every one of them with `execute_all`) and moves there in a straight line.

    :param seed: passed to ``policy.reset`` when the policy has one
    :raises ProtocolError: the policy answered with anything but (horizon, 2)
    """
    reset = getattr(policy, "reset", None)
    if reset is not None:
        reset(seed)
    target = np.asarray(ep.target_entrance)
    pose = (0.0, 0.0, 0.0)
    states = [pose]
    window = deque(maxlen=history)
    executed = 0
    outcome: Outcome = "max_steps"
    for step in range(ep.max_steps):
        window.append(observe(ep, pose, step, executed, crop_radius))
        action = np.asarray(
            policy(PolicyInput(instruction=ep.instruction, history=tuple(window))),
            dtype=float,
        )
        if action.shape != (horizon, 2) or not np.all(np.isfinite(action)):
            raise ProtocolError(
                f"policy must emit {horizon} finite (x, z) waypoints, "
                f"got shape {action.shape}"
            )
        if np.linalg.norm(action[0]) < stop_epsilon:
            outcome = "stopped"
            break
        moves = action if execute_all else action[:1]
        for waypoint in local_to_episode(pose, moves):
            start = np.array(pose[:2])
            delta = waypoint - start
            if np.linalg.norm(delta) < stop_epsilon:
                continue
            if segment_collides(
                ep.grid, ep.to_grid_frame(start), ep.to_grid_frame(waypoint)
            ):
                outcome = "collision"
                break
            pose = (
                float(waypoint[0]),
                float(waypoint[1]),
                math.atan2(delta[0], delta[1]),
            )
            states.append(pose)
            executed += 1
            if within_radius(float(np.linalg.norm(waypoint - target)), reach_radius):
                outcome = "reached"
                break
        if outcome != "max_steps":
            break
    logger.debug(
        "episode %s: %s after %d moves", ep.episode_id, outcome, len(states) - 1
    )
    return Rollout(episode_id=ep.episode_id, states=tuple(states), outcome=outcome)


class OraclePolicy:
    """
    follows the ground truth: the `horizon` waypoints after the ones already
    executed, padded with the final waypoint, then a stop once it is exhausted
    """

    def __init__(
        self,
        ep: Episode,
        sigma: float = 0.0,
        seed: int = 0,
        horizon: int = HORIZON,
    ):
        if sigma < 0:
            raise DomainError(f"sigma must be >= 0, got {sigma}")
        self.gt = ep.gt_trajectory.xz
        self.sigma = sigma
        self.seed = seed
        self.horizon = horizon
        self.stream = f"noisy_oracle/{ep.episode_id}"
        self.rng = substream(seed, self.stream)

    def reset(self, seed: Optional[int] = None) -> None:
        self.rng = substream(self.seed if seed is None else seed, self.stream)

    def __call__(self, inp: PolicyInput) -> np.ndarray:
        obs = inp.current
        start = obs.executed + 1
        if start >= len(self.gt):
            return np.zeros((self.horizon, 2))
        idx = np.minimum(np.arange(start, start + self.horizon), len(self.gt) - 1)
        points = self.gt[idx]
        if self.sigma > 0:
            points = points + self.rng.normal(0.0, self.sigma, size=points.shape)
        return episode_to_local(obs.pose, points)


def oracle_policy(ep: Episode, horizon: int = HORIZON) -> OraclePolicy:
    return OraclePolicy(ep, horizon=horizon)


def noisy_oracle(
    ep: Episode, sigma: float, seed: int, horizon: int = HORIZON
) -> OraclePolicy:
    """oracle with isotropic Gaussian noise of std `sigma` added to every waypoint"""
    return OraclePolicy(ep, sigma=sigma, seed=seed, horizon=horizon)


class GreedyStraightPolicy:
    """walks the straight line to the target in 0.1 m increments, ignoring obstacles"""

    def __init__(self, ep: Episode, step: float = 0.1, horizon: int = HORIZON):
        self.target = np.asarray(ep.target_entrance, dtype=float)
        self.step = step
        self.horizon = horizon

    def __call__(self, inp: PolicyInput) -> np.ndarray:
        pose = inp.current.pose
        offset = self.target - pose[:2]
        distance = float(np.linalg.norm(offset))
        if distance == 0.0:
            return np.zeros((self.horizon, 2))
        reach = np.minimum(np.arange(1, self.horizon + 1) * self.step, distance)
        points = np.asarray(pose[:2]) + np.outer(reach / distance, offset)
        return episode_to_local(pose, points)


def greedy_straight(ep: Episode, horizon: int = HORIZON) -> GreedyStraightPolicy:
    return GreedyStraightPolicy(ep, horizon=horizon)


def frozen_policy(horizon: int = HORIZON) -> Policy:
    """always answers with all-zero waypoints"""
    return lambda inp: np.zeros((horizon, 2))


def final_distance(rollout: Rollout, ep: Episode) -> float:
    return float(np.linalg.norm(rollout.final_xz - np.asarray(ep.target_entrance)))


def success_rate(
    rollouts: Sequence[Rollout], episodes: Sequence[Episode], radius: float
) -> float:
    """fraction of rollouts ending within `radius` of their episode target"""
    if len(rollouts) != len(episodes):
        raise DomainError(f"{len(rollouts)} rollouts for {len(episodes)} episodes")
    if not rollouts:
        raise DomainError("no rollouts to score")
    hits = sum(
        within_radius(final_distance(r, e), radius) for r, e in zip(rollouts, episodes)
    )
    return hits / len(rollouts)


def trajectory_deviation(
    rollout: Rollout, gt: Trajectory, m: int = DEVIATION_SAMPLES
) -> float:
    """
    mean distance between `m` arc-length-uniform samples of the rollout path and of
    the ground truth; a rollout that never moved counts as a stationary point
    """
    if m < 2:
        raise DomainError(f"need at least 2 samples, got {m}")
    ours = _uniform_samples(rollout.xz, m)
    theirs = _uniform_samples(gt.xz, m)
    return float(np.mean(np.linalg.norm(ours - theirs, axis=1)))


def _uniform_samples(xz: np.ndarray, m: int) -> np.ndarray:
    length = float(np.sum(np.linalg.norm(np.diff(xz, axis=0), axis=1)))
    points, _ = interpolate_polyline(xz, np.zeros(len(xz)), np.linspace(0.0, length, m))
    return points


class MetricReport(BaseModel):
    """success rates at three radii and trajectory deviation statistics (meters)"""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    sr_010: float = Field(ge=0, le=1, alias="SR (0.1m)")
    sr_020: float = Field(ge=0, le=1, alias="SR (0.2m)")
    sr_030: float = Field(ge=0, le=1, alias="SR (0.3m)")
    tr_mean: float = Field(ge=0, alias="TR (mean)")
    tr_best: float = Field(ge=0, alias="TR (best)")
    tr_worst: float = Field(ge=0, alias="TR (worst)")
    episode_count: int = Field(gt=0, alias="episodes")

    @model_validator(mode="after")
    def _check_ordering(self) -> "MetricReport":
        if not self.sr_010 <= self.sr_020 <= self.sr_030:
            raise ValueError("success rates must grow with the radius")
        if not self.tr_best <= self.tr_mean <= self.tr_worst:
            raise ValueError("expected TR best <= mean <= worst")
        return self


def aggregate(
    deviations: Sequence[float], distances: Sequence[float]
) -> MetricReport:
    """
    report over per-episode trajectory deviations and final distances to the
    target; sums run over sorted values so that episode order does not matter
    """
    if not deviations:
        raise DomainError("cannot aggregate an empty batch")
    if len(deviations) != len(distances):
        raise DomainError(
            f"{len(deviations)} deviations for {len(distances)} distances"
        )
    ordered = sorted(float(d) for d in deviations)
    best, worst = ordered[0], ordered[-1]
    mean = min(max(math.fsum(ordered) / len(ordered), best), worst)
    rates = [sum(d <= r for d in distances) / len(distances) for r in SR_RADII]
    return MetricReport(
        sr_010=rates[0],
        sr_020=rates[1],
        sr_030=rates[2],
        tr_mean=mean,
        tr_best=best,
        tr_worst=worst,
        episode_count=len(ordered),
    )


def score(
    rollouts: Sequence[Rollout],
    episodes: Sequence[Episode],
    deviation_samples: int = DEVIATION_SAMPLES,
) -> MetricReport:
    if len(rollouts) != len(episodes):
        raise DomainError(f"{len(rollouts)} rollouts for {len(episodes)} episodes")
    pairs = list(zip(rollouts, episodes))
    deviations = [
        trajectory_deviation(r, e.gt_trajectory, deviation_samples) for r, e in pairs
    ]
    return aggregate(deviations, [final_distance(r, e) for r, e in pairs])


def evaluate(
    episodes: Sequence[Episode],
    make_policy: Callable[[Episode], Policy],
    seed: Optional[int] = None,
    deviation_samples: int = DEVIATION_SAMPLES,
    **loop_options,
) -> Tuple[List[Rollout], MetricReport]:
    """rolls out a fresh policy per episode and aggregates the metrics"""
    rollouts = [
        run_episode(ep, make_policy(ep), seed, **loop_options) for ep in episodes
    ]
    report = score(rollouts, episodes, deviation_samples)
    logger.info(
        "evaluated %d episodes: SR(0.1m)=%.3f TR(mean)=%.3f",
        len(episodes),
        report.sr_010,
        report.tr_mean,
    )
    return rollouts, report


def relative_improvement(
    ours: MetricReport, baseline: MetricReport
) -> Dict[str, Optional[float]]:
    """
    relative gain per field, keyed by report alias; success rates compare as
    (ours - base) / base and deviations, where lower is better, as
    (base - ours) / base. Zero baselines give None.
    """
    result: Dict[str, Optional[float]] = {}
    for name, field in MetricReport.model_fields.items():
        if name == "episode_count":
            continue
        mine, base = getattr(ours, name), getattr(baseline, name)
        if base == 0:
            result[field.alias] = None
        elif name.startswith("sr_"):
            result[field.alias] = (mine - base) / base
        else:
            result[field.alias] = (base - mine) / base
    return result

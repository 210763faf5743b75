"""
Manifest-driven batch commands: annotation of scenes into grids, paths and
trajectories, conditioning frames along the trajectories, flow masks, closed-loop
evaluation and alignment negatives.

Every batch command isolates its entries: a failing entry turns into an error
record ``{"id", "stage", "reason"}`` and the batch carries on.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .camera import compose_pose, look_yaw, plucker_embed
from .config import PipelineConfig
from .converters import (
    camera_to_dict,
    read_camera,
    read_depth,
    read_flo,
    read_grid,
    read_json,
    read_pose_track,
    read_ppm,
    read_ply,
    read_trajectory,
    write_alignment,
    write_grid,
    write_json,
    write_jsonl,
    write_mask,
    write_path,
    write_pfm,
    write_plucker,
    write_ply,
    write_ppm,
    write_report,
    write_trajectory,
)
from .evalsim import (
    MAX_STEPS,
    Episode,
    MetricReport,
    Policy,
    Rollout,
    episode_from_path,
    evaluate,
    greedy_straight,
    noisy_oracle,
    oracle_policy,
    run_episode,
    score,
)
from .exceptions import (
    BaseStreetNavException,
    FileFormatError,
    ManifestValidationError,
    UsageError,
)
from .flowmask import flow_magnitude, flow_to_color, mask_summary, topk_mask
from .objectives import AlignmentSample, BBox, swap_negatives
from .occupancy import build_grid, ground_heights, segment_cloud, target_from_bbox
from .planner import astar, dijkstra_oracle, inflate_obstacles
from .pointcloud import cloud_from_depth, estimate_normals
from .reproject import render_frame, reproject_cloud, virtual_poses
from .scenes import synthetic_episodes, synthetic_scene
from .trajectory import denormalize_poses, lift_path, normalize_origin, resample
from .trajectory import smooth as smooth_trajectory

logger = logging.getLogger(__name__)

Record = Dict[str, Any]
Item = TypeVar("Item")

POLICIES = ("oracle", "noisy", "greedy")
EPISODE_INDEX = "episodes.json"
_ENTRY_ERRORS = (BaseStreetNavException, ValueError, OSError)


class ManifestEntry(BaseModel):
    """one scene; file paths are resolved against the manifest directory"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    id: str = Field(min_length=1)
    instruction: str = ""
    depth_file: Path
    camera_file: Path
    image_file: Optional[Path] = None
    flow_dir: Optional[Path] = None
    target_bbox: Optional[BBox] = None
    target_world: Optional[Tuple[float, float, float]] = None

    @model_validator(mode="after")
    def _check_target(self) -> "ManifestEntry":
        if self.target_world is None and self.target_bbox is None:
            raise ValueError("entry needs target_world or target_bbox")
        return self

    def resolved(self, root: Path) -> "ManifestEntry":
        update = {
            name: root / value
            for name in ("depth_file", "camera_file", "image_file", "flow_dir")
            if (value := getattr(self, name)) is not None
        }
        return self.model_copy(update=update)

    def missing_files(self) -> List[str]:
        missing = [
            str(path)
            for path in (self.depth_file, self.camera_file, self.image_file)
            if path is not None and not path.is_file()
        ]
        if self.flow_dir is not None and not self.flow_dir.is_dir():
            missing.append(str(self.flow_dir))
        return missing


class Manifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    root: Path
    entries: List[ManifestEntry]
    errors: List[Record] = []


class BatchReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    written: List[str] = []
    skipped: List[Record] = []
    errors: List[Record] = []

    @property
    def failed(self) -> bool:
        """every entry ended in an error"""
        return bool(self.errors) and not self.written and not self.skipped


class EpisodeRecord(BaseModel):
    """index line of a stored episode, file paths relative to the index"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    episode_id: str
    instruction: str = ""
    grid_file: str
    gt_file: str
    max_steps: int = Field(MAX_STEPS, gt=0)


def error_record(entry_id: Optional[str], stage: str, reason: str) -> Record:
    return {"id": entry_id, "stage": stage, "reason": reason}


def load_manifest(path) -> Manifest:
    """
    :raises UsageError: the manifest cannot be read or is not an entry list
    :raises ManifestValidationError: entry ids are not unique
    """
    path = Path(path)
    try:
        data = read_json(path)
    except (OSError, FileFormatError) as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from exc
    raw_entries = data.get("entries") if isinstance(data, dict) else None
    if not isinstance(raw_entries, list):
        raise UsageError(f"manifest {path} has no 'entries' list")

    ids = [raw.get("id") for raw in raw_entries if isinstance(raw, dict)]
    duplicates = sorted({i for i in ids if i is not None and ids.count(i) > 1})
    if duplicates:
        raise ManifestValidationError(
            [error_record(i, "manifest", "duplicate id") for i in duplicates],
            f"duplicate entry ids {duplicates}",
        )

    root = path.parent
    entries, errors = [], []
    for position, raw in enumerate(raw_entries):
        entry_id = raw.get("id") if isinstance(raw, dict) else None
        try:
            entry = ManifestEntry.model_validate(raw).resolved(root)
        except ValidationError as ve:
            errors.append(error_record(entry_id, "manifest", str(ve)))
            logger.warning("manifest entry %d is invalid", position)
            continue
        missing = entry.missing_files()
        if missing:
            errors.append(error_record(entry.id, "manifest", f"missing {missing}"))
            continue
        entries.append(entry)
    return Manifest(root=root, entries=entries, errors=errors)


def _in_parallel(
    work: Callable[[Item], Any], items: Sequence[Item], jobs: int
) -> List[Any]:
    """results in input order, at most `jobs` at a time"""
    if jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {jobs}")
    if jobs == 1 or len(items) < 2:
        return [work(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(work, items))


def _guarded(
    entry_id: str, work: Callable[[Dict[str, str]], List[Record]]
) -> List[Record]:
    progress = {"stage": "load"}
    try:
        return work(progress)
    except _ENTRY_ERRORS as exc:
        logger.warning("%s failed at %s: %s", entry_id, progress["stage"], exc)
        record = error_record(entry_id, progress["stage"], str(exc))
        return [{"status": "error", **record}]


def _batch_report(
    records: Sequence[Record], errors: Sequence[Record] = ()
) -> BatchReport:
    written, skipped, failed = [], [], list(errors)
    for record in records:
        status = record.pop("status")
        if status == "written":
            written.append(record["id"])
        elif status == "skipped":
            skipped.append(record)
        else:
            failed.append(record)
    return BatchReport(written=written, skipped=skipped, errors=failed)


def _report_dict(report: BatchReport) -> dict:
    return report.model_dump(mode="json")


# episodes on disk


def save_episode(out_dir: Path, ep: Episode) -> None:
    write_grid(out_dir / "grid.pgm", ep.grid)
    write_trajectory(out_dir / "gt.jsonl", ep.gt_trajectory)


def write_episode_index(path: Path, records: Sequence[EpisodeRecord]) -> Path:
    return write_json(path, {"episodes": [r.model_dump() for r in records]})


def load_episodes(path) -> List[Episode]:
    path = Path(path)
    try:
        data = read_json(path)
    except (OSError, FileFormatError) as exc:
        raise UsageError(f"cannot read episodes {path}: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("episodes"), list):
        raise UsageError(f"{path} has no 'episodes' list")
    episodes = []
    for raw in data["episodes"]:
        try:
            record = EpisodeRecord.model_validate(raw)
            grid = read_grid(path.parent / record.grid_file)
            target = np.subtract(
                grid.center_of(grid.target_cell), grid.center_of(grid.agent_cell)
            )
            episodes.append(
                Episode(
                    episode_id=record.episode_id,
                    grid=grid,
                    instruction=record.instruction,
                    target_entrance=(float(target[0]), float(target[1])),
                    gt_trajectory=read_trajectory(path.parent / record.gt_file),
                    max_steps=record.max_steps,
                )
            )
        except (OSError, ValidationError) as exc:
            raise FileFormatError(str(path), str(exc)) from exc
    return episodes


def store_episodes(out: Path, episodes: Sequence[Episode]) -> Path:
    """writes every episode under ``out/<episode_id>/`` plus the index"""
    out = Path(out)
    records = []
    for ep in episodes:
        save_episode(out / ep.episode_id, ep)
        records.append(
            EpisodeRecord(
                episode_id=ep.episode_id,
                instruction=ep.instruction,
                grid_file=f"{ep.episode_id}/grid.pgm",
                gt_file=f"{ep.episode_id}/gt.jsonl",
                max_steps=ep.max_steps,
            )
        )
    return write_episode_index(out / EPISODE_INDEX, records)


# annotate


def annotate_entry(
    entry: ManifestEntry, config: PipelineConfig, out: Path
) -> List[Record]:
    """depth image to grid, A* path, trajectory and ground-truth episode"""

    def work(progress: Dict[str, str]) -> List[Record]:
        model = read_camera(entry.camera_file)
        depth = read_depth(entry.depth_file)
        image = read_ppm(entry.image_file) if entry.image_file else None

        progress["stage"] = "cloud"
        pc = config.pointcloud
        cloud = cloud_from_depth(depth, model, pc.stride, image)
        cloud = estimate_normals(cloud, pc.k)

        progress["stage"] = "segment"
        occ = config.occupancy
        seg = segment_cloud(
            cloud,
            theta_ground=occ.theta_ground,
            theta_wall=occ.theta_wall,
            inconsistency_deg=occ.inconsistency_deg,
            k=pc.k,
        )

        progress["stage"] = "target"
        target_world = entry.target_world
        if target_world is None:
            target_world = target_from_bbox(entry.target_bbox, depth, model)

        progress["stage"] = "grid"
        grid = build_grid(cloud, seg, model.pose, target_world, occ.height_band)
        heights = ground_heights(cloud, seg, model.pose)
        seen = heights[np.isfinite(heights)]
        heights = np.where(
            np.isfinite(heights), heights, float(np.median(seen)) if seen.size else 0.0
        )

        progress["stage"] = "plan"
        planning = inflate_obstacles(grid, config.planner.inflation_radius)
        path = astar(planning, config.planner.unknown_is_occupied)
        if path is None:
            logger.warning("%s: target %s unreachable", entry.id, grid.target_cell)
            return [{"status": "skipped", "id": entry.id, "reason": "unreachable"}]
        if len(path.cells) < 2:
            return [{"status": "skipped", "id": entry.id, "reason": "degenerate"}]

        progress["stage"] = "trajectory"
        tc = config.trajectory
        traj = normalize_origin(lift_path(path, grid, heights), tc.translation_only)
        traj = resample(traj, tc.resample_n)
        if tc.smooth and len(traj) >= 3:
            traj = smooth_trajectory(traj, planning, tc.smooth_iterations)

        progress["stage"] = "write"
        ep = episode_from_path(
            grid,
            path,
            instruction=entry.instruction,
            episode_id=entry.id,
            ground_heights=heights,
            max_steps=config.evalsim.max_steps,
        )
        entry_dir = out / entry.id
        save_episode(entry_dir, ep)
        write_path(entry_dir / "path.json", path)
        write_trajectory(entry_dir / "trajectory.jsonl", traj)
        write_ply(entry_dir / "cloud.ply", cloud)
        logger.info(
            "%s: %d cells, cost %.3f, %d poses",
            entry.id,
            len(path.cells),
            path.cost,
            len(traj),
        )
        return [{"status": "written", "id": entry.id}]

    return _guarded(entry.id, work)


def cmd_annotate(
    manifest_path, config: PipelineConfig, out, jobs: int = 1
) -> BatchReport:
    manifest = load_manifest(manifest_path)
    out = Path(out)
    results = _in_parallel(
        lambda entry: annotate_entry(entry, config, out), manifest.entries, jobs
    )
    report = _batch_report([r for rs in results for r in rs], manifest.errors)
    by_id = {e.id: e for e in manifest.entries}
    records = [
        EpisodeRecord(
            episode_id=entry_id,
            instruction=by_id[entry_id].instruction,
            grid_file=f"{entry_id}/grid.pgm",
            gt_file=f"{entry_id}/gt.jsonl",
            max_steps=config.evalsim.max_steps,
        )
        for entry_id in report.written
    ]
    write_episode_index(out / EPISODE_INDEX, records)
    write_json(out / "annotate_report.json", _report_dict(report))
    return report


# condition


def condition_entry(
    entry: ManifestEntry, config: PipelineConfig, out: Path
) -> List[Record]:
    """Plücker maps and constraint frames along the annotated trajectory"""

    def work(progress: Dict[str, str]) -> List[Record]:
        entry_dir = out / entry.id
        trajectory_file = entry_dir / "trajectory.jsonl"
        if not trajectory_file.is_file():
            name = f"{entry.id}/trajectory.jsonl"
            raise FileFormatError(name, "missing trajectory")
        model = read_camera(entry.camera_file)
        header, poses = read_pose_track(trajectory_file)
        cloud = read_ply(entry_dir / "cloud.ply")

        progress["stage"] = "poses"
        if header.get("frame") == "normalized" and header.get("origin") is not None:
            poses = denormalize_poses(
                poses, header["origin"], header.get("heading_aligned", True)
            )
        rc = config.reproject
        world_poses = [
            compose_pose(model.pose, pose)
            for pose in virtual_poses(poses, rc.camera_height)
        ]

        progress["stage"] = "render"
        frames = reproject_cloud(cloud, model, world_poses, rc.splat_radius)

        progress["stage"] = "write"
        cond_dir = entry_dir / "condition"
        listing = []
        for frame, pose in zip(frames, world_poses):
            name = f"{frame.pose_index:04d}"
            item = {
                "index": frame.pose_index,
                "R": [float(v) for v in pose.rotation.reshape(-1)],
                "t": [float(v) for v in pose.translation],
                "coverage": frame.coverage,
                "depth_file": f"frame_{name}.pfm",
                "plucker_file": f"plucker_{name}.plk",
                "color_file": None,
            }
            write_pfm(cond_dir / item["depth_file"], frame.depth)
            write_plucker(
                cond_dir / item["plucker_file"], plucker_embed(model.with_pose(pose))
            )
            if frame.color is not None:
                item["color_file"] = f"color_{name}.ppm"
                write_ppm(cond_dir / item["color_file"], frame.color)
            listing.append(item)
        write_json(
            cond_dir / "manifest.json",
            {"camera": camera_to_dict(model), "frames": listing},
        )
        logger.info("%s: %d constraint frames", entry.id, len(frames))
        return [{"status": "written", "id": entry.id}]

    return _guarded(entry.id, work)


def cmd_condition(
    manifest_path, config: PipelineConfig, out, jobs: int = 1
) -> BatchReport:
    """reads the trajectories `cmd_annotate` left under `out`"""
    manifest = load_manifest(manifest_path)
    out = Path(out)
    results = _in_parallel(
        lambda entry: condition_entry(entry, config, out), manifest.entries, jobs
    )
    report = _batch_report([r for rs in results for r in rs], manifest.errors)
    write_json(out / "condition_report.json", _report_dict(report))
    return report


# flow masks


def mask_flow_file(flow_file: Path, ratio: float, out_dir: Path) -> Record:
    """mask, flow preview and summary of a single .flo file"""
    flow = read_flo(flow_file)
    magnitude = flow_magnitude(flow)
    mask = topk_mask(magnitude, ratio)
    write_mask(out_dir / f"{flow_file.stem}.pbm", mask, ratio)
    write_ppm(out_dir / f"{flow_file.stem}_flow.ppm", flow_to_color(flow))
    return mask_summary(mask, magnitude)


def mask_flow_files(
    group: str, files: Sequence[Path], ratio: float, out_dir: Path
) -> List[Record]:
    records, summary = [], {}
    for flow_file in files:
        try:
            summary[flow_file.stem] = mask_flow_file(flow_file, ratio, out_dir)
        except _ENTRY_ERRORS as exc:
            logger.warning("%s: %s", flow_file, exc)
            records.append(
                {
                    "status": "error",
                    "file": flow_file.name,
                    **error_record(group, "flowmask", str(exc)),
                }
            )
            continue
        records.append({"status": "written", "id": f"{group}/{flow_file.stem}"})
    if summary:
        write_json(out_dir / "summary.json", summary)
    return records


def cmd_flowmask(
    config: PipelineConfig,
    out,
    manifest_path=None,
    files: Sequence[Path] = (),
    jobs: int = 1,
) -> BatchReport:
    """masks the flow files of every manifest entry, or the given files"""
    out = Path(out)
    ratio = config.flowmask.ratio
    if files:
        records = mask_flow_files("files", [Path(f) for f in files], ratio, out)
        report = _batch_report(records)
    elif manifest_path is not None:
        manifest = load_manifest(manifest_path)

        def run(entry: ManifestEntry) -> List[Record]:
            if entry.flow_dir is None:
                return [{"status": "skipped", "id": entry.id, "reason": "no_flow"}]
            flow_files = sorted(entry.flow_dir.glob("*.flo"))
            if not flow_files:
                return [{"status": "skipped", "id": entry.id, "reason": "no_flow"}]
            return mask_flow_files(
                entry.id, flow_files, ratio, out / entry.id / "flowmask"
            )

        results = _in_parallel(run, manifest.entries, jobs)
        report = _batch_report([r for rs in results for r in rs], manifest.errors)
    else:
        raise UsageError("flowmask needs --manifest or flow files")
    write_json(out / "flowmask_report.json", _report_dict(report))
    return report


# evaluation


def policy_factory(
    name: str, sigma: float, seed: int, horizon: int
) -> Callable[[Episode], Policy]:
    if name == "oracle":
        return lambda ep: oracle_policy(ep, horizon)
    if name == "noisy":
        return lambda ep: noisy_oracle(ep, sigma, seed, horizon)
    if name == "greedy":
        return lambda ep: greedy_straight(ep, horizon)
    raise UsageError(f"unknown policy {name!r}, expected one of {POLICIES}")


def rollout_row(rollout: Rollout) -> dict:
    return {
        "episode_id": rollout.episode_id,
        "outcome": rollout.outcome,
        "states": [list(state) for state in rollout.states],
    }


def cmd_eval(
    episodes_path,
    config: PipelineConfig,
    out,
    policy: str = "oracle",
    sigma: float = 0.0,
    jobs: int = 1,
) -> MetricReport:
    """
    runs the named scripted policy over every stored episode and writes
    ``metrics.json`` and ``rollouts.jsonl``

    :raises UsageError: unknown policy, negative sigma or no episodes
    """
    if sigma < 0:
        raise UsageError(f"--sigma must be >= 0, got {sigma}")
    seed = config.seed
    make_policy = policy_factory(policy, sigma, seed, config.evalsim.horizon)
    episodes = load_episodes(episodes_path)
    if not episodes:
        raise UsageError(f"no episodes in {episodes_path}")
    options = config.evalsim.loop_options()
    rollouts = _in_parallel(
        lambda ep: run_episode(ep, make_policy(ep), seed, **options), episodes, jobs
    )
    report = score(rollouts, episodes, config.evalsim.deviation_samples)
    out = Path(out)
    write_report(out / "metrics.json", report)
    write_jsonl(out / "rollouts.jsonl", [rollout_row(r) for r in rollouts])
    logger.info(
        "%s over %d episodes: SR(0.1m)=%.3f TR(mean)=%.3f",
        policy,
        len(episodes),
        report.sr_010,
        report.tr_mean,
    )
    return report


# alignment negatives


def cmd_swap_negatives(
    manifest_path, config: PipelineConfig, out
) -> List[AlignmentSample]:
    """positives from the manifest entries plus one mismatched negative each"""
    manifest = load_manifest(manifest_path)
    if len(manifest.entries) < 2:
        raise UsageError(
            f"swap-negatives needs at least 2 entries, got {len(manifest.entries)}"
        )
    samples = [
        AlignmentSample(instruction_id=entry.id, observation_id=entry.id, label=1)
        for entry in manifest.entries
    ]
    result = swap_negatives(samples, config.seed)
    write_alignment(Path(out) / "alignment.jsonl", result)
    return result


# self test


class CheckResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    passed: bool
    detail: str


def _check_oracle_suite(seed: int, episodes: int) -> CheckResult:
    eps = synthetic_episodes(episodes, seed)
    _, report = evaluate(eps, oracle_policy, seed)
    return CheckResult(
        name="oracle_suite",
        passed=report.sr_030 == 1.0 and report.tr_mean < 0.05,
        detail=f"SR(0.3m)={report.sr_030:.3f} TR(mean)={report.tr_mean:.4f}",
    )


def _check_planner(seed: int, episodes: int) -> CheckResult:
    mismatches = 0
    for ep in synthetic_episodes(episodes, seed):
        fast, slow = astar(ep.grid), dijkstra_oracle(ep.grid)
        if (fast is None) != (slow is None) or (
            fast is not None and fast.cost != slow.cost
        ):
            mismatches += 1
    return CheckResult(
        name="planner_optimality",
        passed=mismatches == 0,
        detail=f"{mismatches} cost mismatches over {episodes} grids",
    )


def _check_reprojection() -> CheckResult:
    scene = synthetic_scene()
    cloud = cloud_from_depth(scene.depth, scene.camera)
    frame = render_frame(cloud, scene.camera)
    expected = scene.depth.depth
    hit = frame.depth > 0
    error = float(np.max(np.abs(frame.depth[hit] - expected[hit]), initial=0.0))
    same_support = bool(np.array_equal(hit, expected > 0))
    return CheckResult(
        name="identity_reprojection",
        passed=same_support and error < 1e-6,
        detail=f"max depth error {error:.3g} m",
    )


def _check_plucker() -> CheckResult:
    scene = synthetic_scene()
    model = scene.camera.with_pose(look_yaw(0.3, [0.5, -0.2, 1.0]))
    rays = plucker_embed(model)
    norm_error = float(np.max(np.abs(np.linalg.norm(rays.directions, axis=-1) - 1)))
    orthogonality = float(np.max(np.abs(np.sum(rays.directions * rays.moments, -1))))
    return CheckResult(
        name="plucker_constraints",
        passed=norm_error < 1e-9 and orthogonality < 1e-9,
        detail=f"|d|-1 {norm_error:.3g}, d.m {orthogonality:.3g}",
    )


def selftest(seed: int = 0, episodes: int = 20) -> List[CheckResult]:
    """oracle checks on the bundled synthetic data"""
    checks = [
        ("oracle_suite", lambda: _check_oracle_suite(seed, episodes)),
        ("planner_optimality", lambda: _check_planner(seed, episodes)),
        ("identity_reprojection", _check_reprojection),
        ("plucker_constraints", _check_plucker),
    ]
    results = []
    for name, check in checks:
        try:
            results.append(check())
        except _ENTRY_ERRORS as exc:
            results.append(CheckResult(name=name, passed=False, detail=str(exc)))
    return results

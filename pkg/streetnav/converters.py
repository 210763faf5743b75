"""
Readers and writers for every on-disk artifact. Writers are atomic (temporary
file in the target directory, then rename) and JSON is always emitted with sorted
keys so that reruns produce identical bytes.
"""
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, List, Optional, Tuple, Type, TypeVar, Union

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement, PlyParseError
from pydantic import BaseModel, ValidationError

from .camera import CameraModel, PluckerMap, RigidTransform
from .evalsim import MetricReport
from .exceptions import FileFormatError
from .flowmask import FlowField, SalientMask
from .objectives import AlignmentSample
from .occupancy import OccupancyGrid
from .planner import GridPath
from .pointcloud import DepthImage, PointCloud
from .trajectory import Trajectory, TrajectoryMeta

PathLike = Union[str, Path]
Model = TypeVar("Model", bound=BaseModel)

FLO_MAGIC = 202021.25
PLUCKER_MAGIC = b"PLK1"


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path: PathLike, obj: Any) -> Path:
    return atomic_write_bytes(path, dumps_json(obj).encode("utf-8"))


def read_json(path: PathLike) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FileFormatError(str(path), f"invalid JSON: {exc}") from exc


def write_jsonl(path: PathLike, rows: Iterable[Any]) -> Path:
    text = "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
    return atomic_write_bytes(path, text.encode("utf-8"))


def read_jsonl(path: PathLike) -> List[Any]:
    rows = []
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FileFormatError(str(path), f"line {number}: {exc}") from exc
    return rows


def _validated(model: Type[Model], data: Any, path: PathLike) -> Model:
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise FileFormatError(str(path), str(exc)) from exc


# camera


def camera_to_dict(model: CameraModel) -> dict:
    return {
        "fx": model.fx,
        "fy": model.fy,
        "cx": model.cx,
        "cy": model.cy,
        "width": model.width,
        "height": model.height,
        "R": [float(v) for v in model.pose.rotation.reshape(-1)],
        "t": [float(v) for v in model.pose.translation],
    }


def camera_from_dict(data: dict, path: Optional[PathLike] = None) -> CameraModel:
    try:
        pose = RigidTransform(
            rotation=data.get("R", np.eye(3)), translation=data.get("t", [0, 0, 0])
        )
        return CameraModel(
            fx=data["fx"],
            fy=data["fy"],
            cx=data["cx"],
            cy=data["cy"],
            width=data["width"],
            height=data["height"],
            pose=pose,
        )
    except (KeyError, ValueError) as exc:
        where = str(path) if path else None
        raise FileFormatError(where, f"bad camera: {exc}") from exc


def write_camera(path: PathLike, model: CameraModel) -> Path:
    return write_json(path, camera_to_dict(model))


def read_camera(path: PathLike) -> CameraModel:
    return camera_from_dict(read_json(path), path)


# Plücker maps: magic, u32 width, u32 height, row-major 6 x float32 per pixel


def write_plucker(path: PathLike, plucker: PluckerMap) -> Path:
    header = PLUCKER_MAGIC + np.array([plucker.width, plucker.height], "<u4").tobytes()
    return atomic_write_bytes(path, header + plucker.rays.astype("<f4").tobytes())


def read_plucker(path: PathLike) -> np.ndarray:
    """raw (H, W, 6) float32 rays, too coarse to pass the PluckerMap checks"""
    data = Path(path).read_bytes()
    if data[:4] != PLUCKER_MAGIC:
        raise FileFormatError(str(path), "missing PLK1 magic")
    width, height = np.frombuffer(data, "<u4", count=2, offset=4)
    payload = np.frombuffer(data, "<f4", offset=12)
    if payload.size != int(width) * int(height) * 6:
        raise FileFormatError(str(path), "payload size does not match the header")
    return payload.reshape(int(height), int(width), 6)


# netpbm family and PFM depth, through Pillow


def _encode_image(image: Image.Image) -> bytes:
    buffer = io.BytesIO()
    image.save(buffer, format="PPM")
    return buffer.getvalue()


def _decode_image(path: PathLike, mode: str, kind: str) -> np.ndarray:
    try:
        with Image.open(path, formats=["PPM"]) as image:
            image.load()
            if image.mode != mode:
                raise FileFormatError(str(path), f"expected a {kind}, got {image.mode}")
            return np.array(image)
    except FileNotFoundError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise FileFormatError(str(path), f"unreadable {kind}: {exc}") from exc


def write_pgm(path: PathLike, image: np.ndarray) -> Path:
    gray = Image.fromarray(np.asarray(image, dtype=np.uint8))
    return atomic_write_bytes(path, _encode_image(gray))


def read_pgm(path: PathLike) -> np.ndarray:
    return _decode_image(path, "L", "8-bit PGM")


def write_ppm(path: PathLike, image: np.ndarray) -> Path:
    rgb = Image.fromarray(np.asarray(image, dtype=np.uint8))
    return atomic_write_bytes(path, _encode_image(rgb))


def read_ppm(path: PathLike) -> np.ndarray:
    return _decode_image(path, "RGB", "8-bit PPM")


def write_pbm(path: PathLike, bits: np.ndarray) -> Path:
    # PBM stores black as 1, so set bits are drawn black
    gray = np.where(np.asarray(bits, dtype=bool), 0, 255).astype(np.uint8)
    bitmap = Image.fromarray(gray).convert("1", dither=Image.Dither.NONE)
    return atomic_write_bytes(path, _encode_image(bitmap))


def read_pbm(path: PathLike) -> np.ndarray:
    return ~_decode_image(path, "1", "PBM").astype(bool)


def write_mask(path: PathLike, mask: SalientMask, ratio: float) -> Path:
    """PBM plus a ``.json`` sidecar with k and the requested ratio"""
    path = Path(path)
    write_json(path.with_suffix(".json"), {"k": mask.k, "ratio": ratio})
    return write_pbm(path, mask.bits)


def read_mask(path: PathLike) -> SalientMask:
    path = Path(path)
    bits = read_pbm(path)
    meta = read_json(path.with_suffix(".json"))
    return _validated(
        SalientMask,
        {"width": bits.shape[1], "height": bits.shape[0], "bits": bits, "k": meta["k"]},
        path,
    )


def write_pfm(path: PathLike, depth: np.ndarray) -> Path:
    """single-channel little-endian PFM, rows stored bottom to top"""
    plane = Image.fromarray(np.asarray(depth, dtype=np.float32))
    return atomic_write_bytes(path, _encode_image(plane))


def read_pfm(path: PathLike) -> np.ndarray:
    return _decode_image(path, "F", "single-channel PFM").astype(float)


def read_depth(path: PathLike) -> DepthImage:
    try:
        return DepthImage.from_array(read_pfm(path))
    except ValidationError as exc:
        raise FileFormatError(str(path), str(exc)) from exc


# PLY point clouds


def write_ply(path: PathLike, cloud: PointCloud) -> Path:
    """binary little-endian PLY; the viewpoint travels as a header comment"""
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if cloud.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    records = np.empty(len(cloud), dtype=fields)
    for i, axis in enumerate("xyz"):
        records[axis] = cloud.points[:, i]
        if cloud.normals is not None:
            records["n" + axis] = cloud.normals[:, i]
    if cloud.colors is not None:
        for i, channel in enumerate(("red", "green", "blue")):
            records[channel] = cloud.colors[:, i]
    viewpoint = " ".join(repr(float(v)) for v in cloud.viewpoint)
    ply = PlyData(
        [PlyElement.describe(records, "vertex")],
        byte_order="<",
        comments=[f"viewpoint {viewpoint}"],
    )
    buffer = io.BytesIO()
    ply.write(buffer)
    return atomic_write_bytes(path, buffer.getvalue())


def read_ply(path: PathLike) -> PointCloud:
    try:
        ply = PlyData.read(str(path))
    except FileNotFoundError:
        raise
    except (PlyParseError, OSError, ValueError, UnicodeDecodeError) as exc:
        raise FileFormatError(str(path), f"not a readable PLY file: {exc}") from exc
    elements = {element.name: element for element in ply.elements}
    if "vertex" not in elements:
        raise FileFormatError(str(path), "missing vertex element")
    records = elements["vertex"].data
    names = records.dtype.names
    viewpoint = np.zeros(3)
    for comment in ply.comments:
        parts = comment.split()
        if parts[:1] == ["viewpoint"]:
            viewpoint = np.array([float(v) for v in parts[1:4]])

    def columns(keys) -> np.ndarray:
        return np.stack([records[key] for key in keys], axis=1)

    normals = None
    if "nx" in names:
        normals = columns(("nx", "ny", "nz")).astype(float)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    colors = columns(("red", "green", "blue")) if "red" in names else None
    return PointCloud(
        points=columns("xyz").astype(float),
        normals=normals,
        colors=colors,
        viewpoint=viewpoint,
    )


# optical flow, Middlebury .flo


def write_flo(path: PathLike, flow: FlowField) -> Path:
    header = np.array([FLO_MAGIC], "<f4").tobytes()
    header += np.array([flow.width, flow.height], "<i4").tobytes()
    return atomic_write_bytes(path, header + flow.uv().astype("<f4").tobytes())


def read_flo(path: PathLike) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FileFormatError(str(path), "truncated header")
    magic = np.frombuffer(data, "<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FileFormatError(str(path), f"bad magic {magic}")
    width, height = (int(v) for v in np.frombuffer(data, "<i4", count=2, offset=4))
    if width <= 0 or height <= 0:
        raise FileFormatError(str(path), f"bad dimensions {width}x{height}")
    payload = np.frombuffer(data, "<f4", offset=12)
    if payload.size != 2 * width * height:
        raise FileFormatError(str(path), "payload size does not match the header")
    try:
        return FlowField.from_uv(payload.reshape(height, width, 2))
    except ValidationError as exc:
        raise FileFormatError(str(path), str(exc)) from exc


# occupancy grids: PGM cells plus a JSON sidecar


def write_grid(path: PathLike, grid: OccupancyGrid) -> Path:
    path = Path(path)
    sidecar = {
        "resolution": grid.resolution,
        "x_range": list(grid.x_range),
        "z_range": list(grid.z_range),
        "agent_cell": list(grid.agent_cell),
        "target_cell": list(grid.target_cell),
        "target_world": None
        if grid.target_world is None
        else [float(v) for v in grid.target_world],
    }
    write_json(path.with_suffix(".json"), sidecar)
    return write_pgm(path, grid.cells)


def read_grid(path: PathLike) -> OccupancyGrid:
    path = Path(path)
    sidecar = read_json(path.with_suffix(".json"))
    return _validated(OccupancyGrid, {"cells": read_pgm(path), **sidecar}, path)


def write_path(path: PathLike, grid_path: GridPath) -> Path:
    return write_json(
        path, {"cells": [list(c) for c in grid_path.cells], "cost": grid_path.cost}
    )


def read_path(path: PathLike) -> GridPath:
    return _validated(GridPath, read_json(path), path)


# trajectories: a header line, then one pose per line


def write_trajectory(path: PathLike, traj: Trajectory) -> Path:
    header = {"frame": traj.frame, **traj.meta.model_dump(mode="json")}
    rows = [
        {"x": float(x), "y": float(y), "z": float(z), "yaw": float(yaw)}
        for x, y, z, yaw in traj.poses
    ]
    return write_jsonl(path, [header, *rows])


def _split_trajectory(path: PathLike) -> Tuple[dict, np.ndarray]:
    rows = read_jsonl(path)
    if not rows or "frame" not in rows[0]:
        raise FileFormatError(str(path), "missing trajectory header line")
    try:
        poses = np.array([[r["x"], r["y"], r["z"], r["yaw"]] for r in rows[1:]], float)
    except (KeyError, TypeError) as exc:
        raise FileFormatError(str(path), f"bad pose line: {exc}") from exc
    return rows[0], poses.reshape(-1, 4)


def read_pose_track(path: PathLike) -> Tuple[dict, np.ndarray]:
    """header and (N, 4) poses without trajectory validation, N may be 1"""
    header, poses = _split_trajectory(path)
    if len(poses) == 0:
        raise FileFormatError(str(path), "trajectory has no poses")
    return header, poses


def read_trajectory(path: PathLike) -> Trajectory:
    header, poses = _split_trajectory(path)
    header = dict(header)
    frame = header.pop("frame")
    try:
        meta = TrajectoryMeta.model_validate(header)
        return Trajectory(poses=poses, frame=frame, meta=meta)
    except ValidationError as exc:
        raise FileFormatError(str(path), str(exc)) from exc


def write_alignment(path: PathLike, samples: Iterable[AlignmentSample]) -> Path:
    return write_jsonl(path, [s.model_dump() for s in samples])


def read_alignment(path: PathLike) -> List[AlignmentSample]:
    return [_validated(AlignmentSample, row, path) for row in read_jsonl(path)]


def write_report(path: PathLike, report: MetricReport) -> Path:
    return write_json(path, report.model_dump(by_alias=True))


def read_report(path: PathLike) -> MetricReport:
    return _validated(MetricReport, read_json(path), path)

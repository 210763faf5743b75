"""
Pipeline configuration. Every tunable lives here with its default and valid
range; files are JSON and may hold any subset of the fields.
"""
import json
from pathlib import Path
from typing import Iterable, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import UsageError
from .seeding import SEED_LIMIT


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class CameraConfig(Section):
    """intrinsics used when a manifest entry brings none of its own"""

    width: int = Field(1440, gt=0)
    height: int = Field(1080, gt=0)
    fx: float = Field(1000.0, gt=0)
    fy: float = Field(1000.0, gt=0)


class PointCloudConfig(Section):
    stride: int = Field(4, ge=1)
    k: int = Field(16, ge=3)


class OccupancyConfig(Section):
    theta_ground: float = Field(25.0, gt=0, lt=90)
    theta_wall: float = Field(65.0, gt=0, le=90)
    inconsistency_deg: float = Field(30.0, gt=0, le=180)
    height_band: Tuple[float, float] = (0.1, 2.0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "OccupancyConfig":
        if self.theta_wall < self.theta_ground:
            raise ValueError("theta_wall must not be below theta_ground")
        if self.height_band[0] >= self.height_band[1]:
            raise ValueError("height_band must be an increasing pair")
        return self


class PlannerConfig(Section):
    inflation_radius: int = Field(1, ge=0)
    unknown_is_occupied: bool = False


class TrajectoryConfig(Section):
    resample_n: int = Field(20, ge=2)
    translation_only: bool = False
    smooth: bool = True
    smooth_iterations: int = Field(2, ge=0)


class FlowMaskConfig(Section):
    ratio: float = Field(0.1, gt=0, le=1)


class ReprojectConfig(Section):
    camera_height: float = Field(1.4, ge=0)
    splat_radius: int = Field(0, ge=0)


class ObjectivesConfig(Section):
    weight_wpts: float = Field(1.0, ge=0)
    weight_recon: float = Field(1.0, ge=0)
    weight_flag: float = Field(1.0, ge=0)
    bce_eps: float = Field(1e-7, gt=0, lt=0.5)

    def weights(self):
        return {
            "wpts": self.weight_wpts,
            "recon": self.weight_recon,
            "flag": self.weight_flag,
        }


class EvalConfig(Section):
    max_steps: int = Field(100, gt=0)
    history: int = Field(10, ge=1)
    horizon: int = Field(5, ge=1)
    execute_all: bool = False
    reach_radius: float = Field(0.1, gt=0)
    stop_epsilon: float = Field(1e-3, gt=0)
    deviation_samples: int = Field(100, ge=2)
    crop_radius: int = Field(5, ge=0)

    def loop_options(self):
        return self.model_dump(exclude={"max_steps", "deviation_samples"})


class PipelineConfig(Section):
    seed: int = Field(0, ge=0, lt=SEED_LIMIT)
    camera: CameraConfig = CameraConfig()
    pointcloud: PointCloudConfig = PointCloudConfig()
    occupancy: OccupancyConfig = OccupancyConfig()
    planner: PlannerConfig = PlannerConfig()
    trajectory: TrajectoryConfig = TrajectoryConfig()
    flowmask: FlowMaskConfig = FlowMaskConfig()
    reproject: ReprojectConfig = ReprojectConfig()
    objectives: ObjectivesConfig = ObjectivesConfig()
    evalsim: EvalConfig = EvalConfig()


def load_config(path: Union[str, Path, None] = None) -> PipelineConfig:
    """defaults, overlaid with the JSON file at `path` when given"""
    if path is None:
        return PipelineConfig()
    try:
        data = json.loads(Path(path).read_text())
        return PipelineConfig.model_validate(data)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except ValidationError as exc:
        raise UsageError(f"invalid config {path}: {exc}") from exc


def dump_config(config: PipelineConfig) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: PipelineConfig, overrides: Iterable[str]) -> PipelineConfig:
    """
    applies ``section.key=value`` (or ``seed=value``) assignments; values are read
    as JSON, falling back to plain strings

    :raises UsageError: malformed assignment, unknown key or invalid value
    """
    data = config.model_dump()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"override {item!r} is not of the form key=value")
        *sections, leaf = key.strip().split(".")
        node = data
        for section in sections:
            if not isinstance(node.get(section), dict):
                raise UsageError(f"unknown config section {section!r} in {item!r}")
            node = node[section]
        if leaf not in node:
            raise UsageError(f"unknown config key {key!r}")
        node[leaf] = _parse_value(raw.strip())
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise UsageError(f"invalid override: {exc}") from exc

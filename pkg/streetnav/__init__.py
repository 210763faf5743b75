from .camera import CameraModel, RigidTransform, plucker_embed  # noqa: F401
from .evalsim import MetricReport, evaluate, run_episode  # noqa: F401
from .exceptions import (  # noqa: F401
    DomainError,
    FileFormatError,
    ProtocolError,
    UsageError,
)
from .flowmask import flow_magnitude, topk_mask  # noqa: F401
from .occupancy import OccupancyGrid, build_grid  # noqa: F401
from .planner import astar  # noqa: F401
from .pointcloud import cloud_from_depth, estimate_normals  # noqa: F401
from .reproject import reproject_cloud, virtual_poses  # noqa: F401
from .trajectory import Trajectory, normalize_origin, resample, smooth  # noqa: F401
from .version import __version__  # noqa: F401

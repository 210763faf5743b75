"""
Reference loss terms for the two training stages and negative-sample construction
for the vision-instruction alignment flag. Plain float arithmetic, no gradients.
"""
import logging
import math
from typing import List, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .exceptions import DomainError
from .seeding import substream

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
STAGE_PARTS = {1: ("bbox",), 2: ("wpts", "recon", "flag")}


class BBox(BaseModel):
    """
    normalized center/size box; coordinates are clamped so that the box lies
    inside the unit square
    """

    model_config = ConfigDict(frozen=True)

    cx: float = Field(ge=0, le=1)
    cy: float = Field(ge=0, le=1)
    w: float = Field(gt=0, le=1)
    h: float = Field(gt=0, le=1)

    @model_validator(mode="before")
    @classmethod
    def _clamp(cls, data):
        fields = ("cx", "cy", "w", "h")
        if not isinstance(data, dict) or not all(k in data for k in fields):
            return data
        data = dict(data)
        for center, size in (("cx", "w"), ("cy", "h")):
            c, s = float(data[center]), float(data[size])
            if not (0 < s <= 1 and 0 <= c <= 1):
                continue
            lo, hi = max(c - s / 2, 0.0), min(c + s / 2, 1.0)
            data[center], data[size] = (lo + hi) / 2, hi - lo
        return data

    @property
    def corners(self):
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self):
        return self.cx, self.cy, self.w, self.h


class AlignmentSample(BaseModel):
    model_config = ConfigDict(frozen=True)

    instruction_id: str
    observation_id: str
    label: int

    @field_validator("label")
    @classmethod
    def _check_label(cls, value: int) -> int:
        if value not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {value}")
        return value


def _l1(pred, gt) -> float:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise DomainError(f"prediction {pred.shape} and target {gt.shape} differ")
    if pred.size == 0:
        raise DomainError("cannot compute a loss over empty inputs")
    return float(np.mean(np.abs(pred - gt)))


def loss_wpts(pred, gt) -> float:
    """mean absolute element-wise waypoint difference"""
    return _l1(pred, gt)


def loss_recon(pred_vals, gt_vals) -> float:
    """mean absolute difference over the masked salient values"""
    return _l1(pred_vals, gt_vals)


def loss_flag(p: float, y: int, eps: float = BCE_EPS) -> float:
    if y not in (0, 1):
        raise DomainError(f"label must be 0 or 1, got {y}")
    p = min(max(float(p), eps), 1.0 - eps)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def iou(a: BBox, b: BBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area + b.area - inter
    return min(max(inter / union, 0.0), 1.0)


def bbox_l1(pred: BBox, gt: BBox) -> float:
    return _l1(pred.as_tuple(), gt.as_tuple())


def loss_bbox(pred: BBox, gt: BBox) -> float:
    """mean L1 over (cx, cy, w, h) plus 1 - IoU"""
    return bbox_l1(pred, gt) + (1.0 - iou(pred, gt))


def total_loss(
    stage: int,
    parts: Mapping[str, float],
    weights: Optional[Mapping[str, float]] = None,
) -> float:
    """
    stage 1 returns the bounding box term, stage 2 the (weighted) sum of the
    waypoint, reconstruction and alignment terms; extra parts are ignored

    :param weights: per-part multipliers, 1.0 for parts not listed
    """
    if stage not in STAGE_PARTS:
        raise DomainError(f"stage must be 1 or 2, got {stage}")
    names = STAGE_PARTS[stage]
    missing = [name for name in names if name not in parts]
    if missing:
        raise DomainError(f"stage {stage} needs loss parts {missing}")
    weights = weights or {}
    return math.fsum(weights.get(name, 1.0) * float(parts[name]) for name in names)


def derangement(n: int, rng: np.random.Generator) -> List[int]:
    """uniform random cyclic permutation of range(n) (Sattolo), no fixed points"""
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def swap_negatives(
    samples: Sequence[AlignmentSample], seed: int
) -> List[AlignmentSample]:
    """
    the positives followed by as many negatives, each pairing an observation with
    another sample's instruction
    """
    if len(samples) < 2:
        raise DomainError(f"need at least 2 samples, got {len(samples)}")
    positives = [s.model_copy(update={"label": 1}) for s in samples]
    perm = derangement(len(samples), substream(seed, "swap_negatives"))
    negatives = [
        AlignmentSample(
            instruction_id=samples[j].instruction_id,
            observation_id=samples[i].observation_id,
            label=0,
        )
        for i, j in enumerate(perm)
    ]
    logger.debug("built %d negatives", len(negatives))
    return positives + negatives

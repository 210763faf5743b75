"""Optical-flow magnitude and the top-k salient pixel mask."""
import logging
import math
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .exceptions import DomainError

logger = logging.getLogger(__name__)

DEFAULT_RATIO = 0.1


class FlowField(BaseModel):
    """per-pixel displacement (u, v) in pixels, arrays of shape (height, width)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    width: int = Field(gt=0)
    height: int = Field(gt=0)
    u: np.ndarray
    v: np.ndarray

    @model_validator(mode="after")
    def _check_components(self) -> "FlowField":
        for name in ("u", "v"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (self.height, self.width):
                raise ValueError(
                    f"{name} must have shape {(self.height, self.width)}, "
                    f"got {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        return self

    @classmethod
    def from_uv(cls, uv: np.ndarray) -> "FlowField":
        """from an interleaved (height, width, 2) array"""
        uv = np.asarray(uv, dtype=float)
        return cls(width=uv.shape[1], height=uv.shape[0], u=uv[..., 0], v=uv[..., 1])

    def uv(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)


class SalientMask(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    width: int = Field(gt=0)
    height: int = Field(gt=0)
    bits: np.ndarray
    k: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_bits(self) -> "SalientMask":
        bits = np.array(self.bits, dtype=bool)
        if bits.shape != (self.height, self.width):
            raise ValueError(
                f"bits must have shape {(self.height, self.width)}, got {bits.shape}"
            )
        if int(bits.sum()) != self.k:
            count = int(bits.sum())
            raise ValueError(f"mask has {count} set bits, expected k={self.k}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)
        return self

    @property
    def ratio(self) -> float:
        return self.k / (self.width * self.height)


def flow_magnitude(flow: FlowField) -> np.ndarray:
    return np.hypot(flow.u, flow.v)


def mask_size(ratio: float, width: int, height: int) -> int:
    return max(1, math.floor(ratio * width * height))


def topk_mask(magnitude: np.ndarray, ratio: float = DEFAULT_RATIO) -> SalientMask:
    """
    marks the k = floor(ratio * H * W) largest magnitudes (at least one); pixels
    tied with the k-th value are taken in row-major order
    """
    mag = np.asarray(magnitude, dtype=float)
    if mag.ndim != 2 or mag.size == 0:
        raise DomainError(f"magnitude map must be non-empty 2D, got {mag.shape}")
    if not 0 < ratio <= 1:
        raise DomainError(f"ratio must be in (0, 1], got {ratio}")
    height, width = mag.shape
    k = mask_size(ratio, width, height)
    flat = mag.reshape(-1)
    # introselect, the k-th largest ends up at position size - k
    kth = np.partition(flat, flat.size - k)[flat.size - k]
    above = flat > kth
    need = k - int(above.sum())
    ties = np.flatnonzero(flat == kth)[:need]
    bits = above.copy()
    bits[ties] = True
    return SalientMask(width=width, height=height, bits=bits.reshape(mag.shape), k=k)


def masked_extract(image: np.ndarray, mask: SalientMask) -> np.ndarray:
    """values under the mask in row-major order, one row per pixel for color images"""
    image = np.asarray(image)
    if image.shape[:2] != (mask.height, mask.width):
        raise DomainError(
            f"image is {image.shape[:2]}, mask is {(mask.height, mask.width)}"
        )
    return image[mask.bits]


def mask_summary(mask: SalientMask, magnitude: np.ndarray) -> Dict[str, float]:
    """counts plus the smallest selected magnitude"""
    selected = np.asarray(magnitude)[mask.bits]
    return {
        "k": mask.k,
        "ratio": mask.ratio,
        "width": mask.width,
        "height": mask.height,
        "threshold": float(selected.min()) if selected.size else 0.0,
    }


def flow_to_color(flow: FlowField, max_magnitude: Optional[float] = None) -> np.ndarray:
    """
    (H, W, 3) uint8 debug rendering: hue follows the flow direction and
    saturation the magnitude relative to `max_magnitude` (the field maximum by
    default)
    """
    mag = flow_magnitude(flow)
    scale = max_magnitude if max_magnitude else float(mag.max())
    sat = np.clip(mag / scale, 0.0, 1.0) if scale > 0 else np.zeros_like(mag)
    hue = (np.arctan2(-flow.v, -flow.u) / np.pi + 1.0) / 2.0

    h6 = hue * 6.0
    sector = np.floor(h6).astype(int) % 6
    frac = h6 - np.floor(h6)
    p = 1.0 - sat
    q = 1.0 - sat * frac
    t = 1.0 - sat * (1.0 - frac)
    one = np.ones_like(sat)
    choices = [
        (one, t, p),
        (q, one, p),
        (p, one, t),
        (p, q, one),
        (t, p, one),
        (one, p, q),
    ]
    rgb = np.zeros(mag.shape + (3,))
    for index, channels in enumerate(choices):
        selected = sector == index
        for c in range(3):
            rgb[..., c][selected] = channels[c][selected]
    return np.round(rgb * 255).astype(np.uint8)

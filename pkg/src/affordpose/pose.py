"""Coordinate-space algebra for 16-keypoint poses.

A pose is an ``(16, 2)`` float array of ``(x, y)`` keypoints.  Functions here
are frame-agnostic: the caller decides whether coordinates live in the pixel
frame (y down) or the crop-relative frame (y up, ``[-0.5, 0.5]`` spans the
scene crop).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

NUM_KEYPOINTS = 16
EPS = 1e-6

# MPII-style naming; slots 2/3 and 11/12 are swapped relative to MPII so that
# index 2 is the left hip and index 11 the right shoulder (torso anchors).
KEYPOINT_NAMES = (
    "r_ankle", "r_knee", "l_hip", "r_hip", "l_knee", "l_ankle",
    "pelvis", "thorax", "upper_neck", "head_top",
    "r_wrist", "r_shoulder", "r_elbow", "l_shoulder", "l_elbow", "l_wrist",
)
LEFT_HIP = 2
RIGHT_SHOULDER = 11

BONES = (
    (0, 1), (1, 3), (3, 6), (2, 6), (2, 4), (4, 5),
    (6, 7), (7, 8), (8, 9),
    (10, 12), (12, 11), (11, 7), (13, 7), (13, 14), (14, 15),
)


class InvalidPoseError(ValueError):
    pass


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(f"inverted box {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


UNIT_BOX = BBox(-0.5, -0.5, 0.5, 0.5)


def as_pose(pose) -> np.ndarray:
    """Coerce ``pose`` (16x2 or flat 32) into a validated float64 array."""
    arr = np.asarray(pose, dtype=np.float64)
    if arr.shape == (2 * NUM_KEYPOINTS,):
        arr = arr.reshape(NUM_KEYPOINTS, 2)
    if arr.shape != (NUM_KEYPOINTS, 2):
        raise InvalidPoseError(f"expected {NUM_KEYPOINTS} keypoints, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidPoseError("pose has non-finite keypoints")
    return arr


def flatten(pose) -> list[float]:
    """Row-major ``x0, y0, ..., x15, y15`` serialization."""
    return [float(v) for v in as_pose(pose).reshape(-1)]


def enclosing_box(pose) -> BBox:
    p = as_pose(pose)
    lo = p.min(axis=0)
    hi = p.max(axis=0)
    return BBox(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def deform(pose, from_box: BBox, to_box: BBox) -> np.ndarray:
    """Affinely map ``pose`` so that ``from_box`` lands on ``to_box``.

    Box centers map to each other; widths/heights below ``EPS`` are clamped so
    degenerate source boxes collapse onto the target center instead of
    dividing by zero.
    """
    p = as_pose(pose)
    if from_box == to_box:
        return p.copy()
    src_c = np.array(from_box.center)
    dst_c = np.array(to_box.center)
    src_size = np.maximum([from_box.width, from_box.height], EPS)
    dst_size = np.array([to_box.width, to_box.height])
    return (p - src_c) * (dst_size / src_size) + dst_c


def normalize(pose) -> np.ndarray:
    return deform(pose, enclosing_box(pose), UNIT_BOX)


def is_degenerate(pose) -> bool:
    box = enclosing_box(pose)
    return box.width < EPS or box.height < EPS


def refine(template, offsets, scale) -> np.ndarray:
    """Turn a normalized template into a concrete pose in the crop frame.

    ``offsets`` is a flat ``2M`` vector in ``[-0.5, 0.5]``; ``scale`` is
    ``(sx, sy)`` in ``[0, 2]``.  The result is ``normalize(template + offsets)``
    stretched by the scale, so it stays centered on the origin.
    """
    t = as_pose(template)
    d = np.asarray(offsets, dtype=np.float64).reshape(-1)
    s = np.asarray(scale, dtype=np.float64).reshape(-1)
    if d.shape != (2 * NUM_KEYPOINTS,):
        raise RangeError(f"offsets must have {2 * NUM_KEYPOINTS} values, got {d.shape}")
    if s.shape != (2,):
        raise RangeError(f"scale must have 2 values, got {s.shape}")
    if not (np.all(np.isfinite(d)) and np.all(np.abs(d) <= 0.5)):
        raise RangeError("offsets outside [-0.5, 0.5]")
    if not (np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 2))):
        raise RangeError("scale outside [0, 2]")
    return normalize(t + d.reshape(NUM_KEYPOINTS, 2)) * s


def torso_diameter(pose) -> float:
    p = as_pose(pose)
    return float(np.hypot(*(p[LEFT_HIP] - p[RIGHT_SHOULDER])))


def stack_poses(poses: Sequence) -> np.ndarray:
    return np.stack([as_pose(p) for p in poses])

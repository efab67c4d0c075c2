"""Boxes and points on the unit square, plus the overlap/distance measures."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class GeometryError(ValueError):
    pass


def _check_unit(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value < 0.0 or value > 1.0:
        raise GeometryError(f"{name}={value!r} outside the unit square")
    return value


@dataclass(frozen=True, slots=True)
class Box:
    """Axis-aligned box with normalized coordinates ``(x1, y1, x2, y2)``."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for name in ("x1", "y1", "x2", "y2"):
            object.__setattr__(self, name, _check_unit(name, getattr(self, name)))
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise GeometryError(f"inverted box {self.as_tuple()}")

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "Box":
        if len(values) != 4:
            raise GeometryError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*values)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> "Point":
        return Point((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def contains(self, p: "Point") -> bool:
        return self.x1 <= p.x <= self.x2 and self.y1 <= p.y <= self.y2


@dataclass(frozen=True, slots=True)
class Point:
    x: float
    y: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", _check_unit("x", self.x))
        object.__setattr__(self, "y", _check_unit("y", self.y))

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "Point":
        if len(values) != 2:
            raise GeometryError(f"point needs 2 coordinates, got {len(values)}")
        return cls(*values)

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 when both boxes are degenerate."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if iw > 0.0 and ih > 0.0 else 0.0
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def l1_box(a: Box, b: Box) -> float:
    """Mean absolute coordinate difference (coordinates already image-normalized)."""
    return (abs(a.x1 - b.x1) + abs(a.y1 - b.y1) + abs(a.x2 - b.x2) + abs(a.y2 - b.y2)) / 4.0


def l1_point(a: Point, b: Point) -> float:
    return (abs(a.x - b.x) + abs(a.y - b.y)) / 2.0


# Vectorized forms used on whole prediction/ground-truth sets. Same arithmetic
# as the scalar functions above, broadcast over an (M, N) grid.

def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0.0) & (ih > 0.0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def l1_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise mean-absolute-difference between rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a[:, None, :] - b[None, :, :]).mean(axis=2)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=float)


def points_to_array(points: Sequence[Point]) -> np.ndarray:
    if not points:
        return np.zeros((0, 2))
    return np.array([p.as_tuple() for p in points], dtype=float)

"""Pairwise object cost, alignment potential and the revision shaping signal."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, Point, boxes_to_array, iou, iou_matrix, l1_box, l1_matrix, l1_point, points_to_array
from .matching import Assignment, match_cost_matrix, match_objects

# Below this alignment cost the initial response is treated as perfect.
PHI_EPS = 1e-6


def pairwise_cost(pred_box: Box, pred_point: Point, gt_box: Box, gt_point: Point) -> float:
    """Average of ``1 - IoU``, box L1 and point L1; 0 is a perfect match."""
    return ((1.0 - iou(pred_box, gt_box)) + l1_box(pred_box, gt_box) + l1_point(pred_point, gt_point)) / 3.0


def pairwise_cost_arrays(pred_boxes: np.ndarray, pred_points: np.ndarray,
                         gt_boxes: np.ndarray, gt_points: np.ndarray) -> np.ndarray:
    """(M, N) matrix of :func:`pairwise_cost` over coordinate arrays."""
    return ((1.0 - iou_matrix(pred_boxes, gt_boxes))
            + l1_matrix(pred_boxes, gt_boxes)
            + l1_matrix(pred_points, gt_points)) / 3.0


def pairwise_cost_matrix(pred_boxes: Sequence[Box], pred_points: Sequence[Point],
                         gt_boxes: Sequence[Box], gt_points: Sequence[Point]) -> np.ndarray:
    gb, gp = boxes_to_array(gt_boxes), points_to_array(gt_points)
    if not pred_boxes:
        return np.zeros((0, len(gt_boxes)))
    return pairwise_cost_arrays(boxes_to_array(pred_boxes), points_to_array(pred_points), gb, gp)


@dataclass(frozen=True)
class ShapingSet:
    """One response's predicted objects bundled with the scene's ground truth."""

    pred_boxes: tuple[Box, ...]
    pred_points: tuple[Point, ...]
    gt_boxes: tuple[Box, ...]
    gt_points: tuple[Point, ...]

    def __post_init__(self) -> None:
        if len(self.pred_boxes) != len(self.pred_points):
            raise ValueError("prediction boxes and points differ in length")
        if not self.gt_boxes or len(self.gt_boxes) != len(self.gt_points):
            raise ValueError("ground truth must be non-empty with one point per box")

    @classmethod
    def from_response(cls, response, scene) -> "ShapingSet":
        return cls(tuple(response.boxes), tuple(response.points), tuple(scene.gt_boxes), tuple(scene.gt_points))


@dataclass(frozen=True)
class ShapingRecord:
    phi_initial: float
    phi_revised: float
    delta_phi: float
    assignment: Assignment | None = None


def mean_pair_cost(pair_costs: Sequence[float]) -> float:
    return float(np.mean(pair_costs))


def alignment_cost(s: ShapingSet) -> tuple[float, Assignment]:
    """Mean matched cost over every pair, dummies included.

    An empty prediction pads every ground-truth object with a unit-cost dummy,
    so its cost is exactly 1.
    """
    assignment, pair_costs = match_objects(s.pred_boxes, s.pred_points, s.gt_boxes, s.gt_points)
    return mean_pair_cost(pair_costs), assignment


def alignment_cost_from_costs(costs: np.ndarray) -> tuple[float, Assignment]:
    """Same as :func:`alignment_cost` for a precomputed (M, N) cost matrix."""
    assignment, pair_costs = match_cost_matrix(costs)
    return mean_pair_cost(pair_costs), assignment


def shaping_signal(phi_initial: float, phi_revised: float) -> float:
    """Clamped relative improvement of the revised cost over the initial one."""
    if phi_initial < PHI_EPS:
        return 0.0
    return min(1.0, max(0.0, (phi_initial - phi_revised) / phi_initial))


def consolidate(initial: ShapingSet, revised: ShapingSet) -> ShapingRecord:
    phi1, _ = alignment_cost(initial)
    phi2, assignment = alignment_cost(revised)
    return ShapingRecord(phi1, phi2, shaping_signal(phi1, phi2), assignment)

"""Candidate rewards, group-relative advantages and shaping-based post-scaling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .consolidation import ShapingSet, alignment_cost
from .response import FormatError, Response, parse

SIGMA_EPS = 1e-8
DEFAULT_OMEGA = 5.0


@dataclass(frozen=True)
class RewardBreakdown:
    """Reward terms of one candidate.

    ``omega`` is the weight actually applied, 0 when shaping is switched off,
    and ``scaled_advantage`` equals ``advantage`` when post-scaling is off.
    """

    r_format: float
    r_acc: float
    delta_phi: float
    omega: float
    total: float
    advantage: float = 0.0
    scaled_advantage: float = 0.0


def format_reward(raw_text: str) -> float:
    try:
        parse(raw_text)
    except FormatError:
        return 0.0
    return 1.0


def accuracy_reward(response: Response, scene) -> float:
    """``1 - alignment cost`` of the response against the scene's objects."""
    phi, _ = alignment_cost(ShapingSet.from_response(response, scene))
    return 1.0 - phi


def total_reward(r_format: float, r_acc: float, delta_phi: float, omega: float = DEFAULT_OMEGA) -> float:
    if omega < 0:
        raise ValueError("omega must be non-negative")
    return r_format + r_acc + omega * delta_phi


def group_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Z-scores against the group mean and population standard deviation."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError(f"need a group of at least 2 rewards, got {len(r)}")
    mu = r.mean()
    sigma = r.std()
    return (r - mu) / (sigma + SIGMA_EPS)


def post_scale(advantage, delta_phi):
    """Multiply by ``1 + delta_phi``: magnitude grows, sign is kept."""
    return (1.0 + delta_phi) * advantage

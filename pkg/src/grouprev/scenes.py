"""Synthetic grounding scenes over a discrete anchor grid.

A scene stands in for an (image, question, answer) triple: ground-truth
objects plus a descriptor of soft evidence over the anchors. Hard scenes add
distractor evidence next to the targets and blur it, so the evidence is
ambiguous in the way similar-looking instances are.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property, lru_cache
from typing import Iterable, Sequence

import numpy as np

from .consolidation import pairwise_cost_arrays
from .geometry import Box, Point, boxes_to_array, points_to_array

SCHEMA_VERSION = 1
DIFFICULTIES = ("easy", "hard")
EASY_TEMPERATURE = 0.05
HARD_TEMPERATURE = 0.2
JITTER_CELLS = 0.25
DISTRACTOR_RATIO = 0.8
HARD_COUNT_DEFLATION = (0.45, 0.75)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    grid: int = 8
    scales: tuple[float, ...] = (0.15, 0.3)
    max_objects: int = 4
    max_slots: int = 6
    # Revision-round review: evidence within this Chebyshev distance (in grid
    # cells) of the initially proposed anchors is re-read sharply. None: off.
    review_radius: int | None = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))

    def problems(self) -> list[str]:
        out = []
        if self.grid < 2:
            out.append(f"grid must be >= 2 (got {self.grid})")
        if not self.scales or any(not 0.0 < s <= 1.0 for s in self.scales):
            out.append(f"scales must be non-empty and in (0, 1] (got {list(self.scales)})")
        if self.max_objects < 1:
            out.append(f"max_objects must be >= 1 (got {self.max_objects})")
        if self.max_slots < 1:
            out.append(f"max_slots must be >= 1 (got {self.max_slots})")
        if self.review_radius is not None and self.review_radius < 0:
            out.append(f"review_radius must be >= 0 or null (got {self.review_radius})")
        return out

    @property
    def num_anchors(self) -> int:
        return self.grid * self.grid * len(self.scales)

    @property
    def num_actions(self) -> int:
        return self.num_anchors + 1

    @property
    def num_features(self) -> int:
        return 2 * self.num_actions + self.max_slots + 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        unknown = set(d) - {"grid", "scales", "max_objects", "max_slots", "review_radius"}
        if unknown:
            raise ValueError(f"unknown env keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class AnchorGrid:
    """``g x g`` positions crossed with box scales; anchor point = box center.

    Anchor ``k`` sits at column ``i``, row ``j`` with scale index ``s`` where
    ``k = (i * g + j) * len(scales) + s``.
    """

    g: int
    scales: tuple[float, ...]
    boxes: np.ndarray
    points: np.ndarray
    positions: np.ndarray

    @property
    def num_anchors(self) -> int:
        return len(self.boxes)

    @cached_property
    def cells(self) -> list[tuple[Box, Point]]:
        return [(Box(*b), Point(*p)) for b, p in zip(self.boxes.tolist(), self.points.tolist())]

    @cached_property
    def cost(self) -> np.ndarray:
        """Anchor-to-anchor pairwise cost, used to spread descriptor evidence."""
        return pairwise_cost_arrays(self.boxes, self.points, self.boxes, self.points)

    def index(self, i: int, j: int, s: int) -> int:
        return (i * self.g + j) * len(self.scales) + s


@lru_cache(maxsize=16)
def _anchor_grid(g: int, scales: tuple[float, ...]) -> AnchorGrid:
    boxes, positions = [], []
    for i in range(g):
        for j in range(g):
            cx, cy = (i + 0.5) / g, (j + 0.5) / g
            for s in scales:
                h = s / 2.0
                boxes.append([max(0.0, cx - h), max(0.0, cy - h), min(1.0, cx + h), min(1.0, cy + h)])
                positions.append([i, j])
    boxes = np.array(boxes)
    points = np.column_stack([(boxes[:, 0] + boxes[:, 2]) / 2.0, (boxes[:, 1] + boxes[:, 3]) / 2.0])
    for a in (boxes, points):
        a.setflags(write=False)
    return AnchorGrid(g, scales, boxes, points, np.array(positions))


def anchor_grid(g: int, scales: Sequence[float]) -> AnchorGrid:
    scales = tuple(float(s) for s in scales)
    if int(g) != g or g < 2:
        raise ValueError(f"grid side must be an integer >= 2, got {g!r}")
    if not scales or any(not 0.0 < s <= 1.0 for s in scales):
        raise ValueError(f"scales must be non-empty and each in (0, 1], got {list(scales)}")
    return _anchor_grid(int(g), scales)


def grid_for(env: EnvConfig) -> AnchorGrid:
    return anchor_grid(env.grid, env.scales)


@dataclass(frozen=True)
class SceneSpec:
    id: str
    gt_boxes: tuple[Box, ...]
    gt_points: tuple[Point, ...]
    descriptor: tuple[float, ...]
    difficulty: str
    seed: int
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self) -> None:
        if not self.gt_boxes or len(self.gt_boxes) != len(self.gt_points):
            raise ValueError(f"scene {self.id}: need >= 1 object with one point per box")
        for b, p in zip(self.gt_boxes, self.gt_points):
            if not b.contains(p):
                raise ValueError(f"scene {self.id}: point {p.as_tuple()} outside box {b.as_tuple()}")
        if len(self.descriptor) != self.env.num_actions:
            raise ValueError(f"scene {self.id}: descriptor length {len(self.descriptor)} != {self.env.num_actions}")
        if any(d < 0 for d in self.descriptor):
            raise ValueError(f"scene {self.id}: negative descriptor entry")
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"scene {self.id}: unknown difficulty {self.difficulty!r}")

    @property
    def num_objects(self) -> int:
        return len(self.gt_boxes)

    @cached_property
    def gt_box_array(self) -> np.ndarray:
        return boxes_to_array(self.gt_boxes)

    @cached_property
    def gt_point_array(self) -> np.ndarray:
        return points_to_array(self.gt_points)

    @cached_property
    def descriptor_array(self) -> np.ndarray:
        a = np.array(self.descriptor, dtype=float)
        a.setflags(write=False)
        return a

    @cached_property
    def anchor_costs(self) -> np.ndarray:
        """(K, N) pairwise cost of every anchor against every object."""
        grid = grid_for(self.env)
        return pairwise_cost_arrays(grid.boxes, grid.points, self.gt_box_array, self.gt_point_array)

    @cached_property
    def sharp_evidence(self) -> np.ndarray:
        """Unambiguous evidence: each object's best anchor at 1, easy-tier sharpness."""
        c = self.anchor_costs
        return np.exp(-(c - c.min(axis=0)) / EASY_TEMPERATURE).sum(axis=1)

    def reviewed_descriptor(self, proposed: Sequence[int]) -> np.ndarray:
        """Descriptor after re-examining the neighbourhood of proposed anchors.

        Anchors within ``env.review_radius`` cells of a proposal take the sharp
        evidence scaled to the strongest original evidence there, so the local
        magnitude is kept but concentrated on the true objects (distractors
        there vanish). The rest, and the count cue, keep the original values.
        """
        radius = self.env.review_radius
        d = self.descriptor_array
        if radius is None or len(proposed) == 0:
            return d
        grid = grid_for(self.env)
        pos = grid.positions
        near = np.zeros(len(pos), dtype=bool)
        for p in {tuple(pos[a]) for a in proposed}:
            near |= np.max(np.abs(pos - np.array(p)), axis=1) <= radius
        out = d.copy()
        out[:-1][near] = self.sharp_evidence[near] * d[:-1][near].max()
        return out

    def to_record(self) -> dict:
        return {
            "v": SCHEMA_VERSION,
            "id": self.id,
            "seed": self.seed,
            "difficulty": self.difficulty,
            "env": self.env.to_dict(),
            "gt": [{"bbox": list(b.as_tuple()), "point": list(p.as_tuple())}
                   for b, p in zip(self.gt_boxes, self.gt_points)],
            "descriptor": list(self.descriptor),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SceneSpec":
        expected = {"v", "id", "seed", "difficulty", "env", "gt", "descriptor"}
        if not isinstance(rec, dict) or set(rec) != expected:
            got = sorted(rec) if isinstance(rec, dict) else type(rec).__name__
            raise ValueError(f"expected fields {sorted(expected)}, got {got}")
        if rec["v"] != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {rec['v']!r}")
        return cls(
            id=str(rec["id"]),
            gt_boxes=tuple(Box.from_seq(o["bbox"]) for o in rec["gt"]),
            gt_points=tuple(Point.from_seq(o["point"]) for o in rec["gt"]),
            descriptor=tuple(float(x) for x in rec["descriptor"]),
            difficulty=rec["difficulty"],
            seed=int(rec["seed"]),
            env=EnvConfig.from_dict(rec["env"]),
        )


def scene_seed(master: int, index: int) -> int:
    """Per-scene seed: first 8 bytes (little endian) of sha256("<master>:<index>")."""
    digest = hashlib.sha256(f"{master}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _soft_one_hot(grid: AnchorGrid, anchor: int, temperature: float) -> np.ndarray:
    return np.exp(-grid.cost[:, anchor] / temperature)


def _jittered_object(rng: np.random.Generator, grid: AnchorGrid, anchor: int) -> tuple[Box, Point]:
    cell = 1.0 / grid.g
    radius = JITTER_CELLS * cell * np.sqrt(rng.random())
    angle = 2.0 * np.pi * rng.random()
    dx, dy = radius * np.cos(angle), radius * np.sin(angle)
    b = np.clip(grid.boxes[anchor] + np.array([dx, dy, dx, dy]), 0.0, 1.0)
    box = Box(*b.tolist())
    hw, hh = (b[2] - b[0]) / 2.0, (b[3] - b[1]) / 2.0
    ox, oy = rng.uniform(-0.25, 0.25, size=2)
    cx, cy = (b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0
    point = Point(float(np.clip(cx + ox * hw, b[0], b[2])), float(np.clip(cy + oy * hh, b[1], b[3])))
    return box, point


def _neighbour_anchors(grid: AnchorGrid, targets: Sequence[int]) -> list[int]:
    target_set = set(targets)
    out = set()
    for t in targets:
        cheb = np.max(np.abs(grid.positions - grid.positions[t]), axis=1)
        out.update(int(k) for k in np.flatnonzero(cheb == 1))
    return sorted(out - target_set)


def generate_scene(rng: np.random.Generator, difficulty: str, grid: AnchorGrid, max_objects: int, *,
                   scene_id: str = "", seed: int = 0, env: EnvConfig | None = None,
                   temperature: float | None = None) -> SceneSpec:
    """Draw one scene.

    ``temperature`` overrides the tier's evidence temperature (tests use it to
    take the sharp limit).
    """
    if max_objects < 1:
        raise ValueError("max_objects must be >= 1")
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    env = env or EnvConfig(grid=grid.g, scales=grid.scales, max_objects=max_objects)
    n_obj = int(rng.integers(1, max_objects + 1))
    n_pos = grid.g * grid.g
    n_obj = min(n_obj, n_pos)
    pos = rng.choice(n_pos, size=n_obj, replace=False)
    scale_idx = rng.integers(len(grid.scales), size=n_obj)
    targets = [int(p) * len(grid.scales) + int(s) for p, s in zip(pos, scale_idx)]

    objects = [_jittered_object(rng, grid, t) for t in targets]

    hard = difficulty == "hard"
    temp = temperature if temperature is not None else (HARD_TEMPERATURE if hard else EASY_TEMPERATURE)
    evidence = np.zeros(grid.num_anchors)
    for t in targets:
        evidence += _soft_one_hot(grid, t, temp)
    amplitude = float(n_obj)

    if hard:
        pool = _neighbour_anchors(grid, targets)
        n_dis = min(int(rng.integers(2, 5)), len(pool))
        distractors = [pool[int(i)] for i in rng.choice(len(pool), size=n_dis, replace=False)]
        amps = rng.uniform(0.85, 1.15, size=n_dis)
        base = evidence
        while True:
            evidence = base.copy()
            for d, a in zip(distractors, amps):
                evidence += a * _soft_one_hot(grid, d, temp)
            if evidence[distractors].max() >= DISTRACTOR_RATIO * evidence[targets].min():
                break
            amps = amps * 1.1
        # similar-looking instances get merged when counting
        amplitude *= float(rng.uniform(*HARD_COUNT_DEFLATION))

    # STOP entry: count cue, exact on easy scenes and deflated on hard ones
    descriptor = np.append(evidence, amplitude)
    return SceneSpec(
        id=scene_id,
        gt_boxes=tuple(b for b, _ in objects),
        gt_points=tuple(p for _, p in objects),
        descriptor=tuple(descriptor.tolist()),
        difficulty=difficulty,
        seed=seed,
        env=env,
    )


def make_scene(master: int, index: int, difficulty: str, env: EnvConfig) -> SceneSpec:
    seed = scene_seed(master, index)
    rng = np.random.default_rng(seed)
    tier = difficulty
    if difficulty == "mixed":
        tier = "hard" if rng.random() < 0.5 else "easy"
    return generate_scene(rng, tier, grid_for(env), env.max_objects,
                          scene_id=f"{master}-{index}", seed=seed, env=env)


def generate_dataset(master: int, n: int, difficulty: str = "hard", env: EnvConfig | None = None,
                     threads: int = 1) -> list[SceneSpec]:
    """``n`` scenes, a pure function of ``(master, n, difficulty, env)``.

    ``difficulty`` is ``easy``, ``hard`` or ``mixed`` (each scene's tier
    drawn with probability 1/2 from its own stream).
    """
    if difficulty not in DIFFICULTIES + ("mixed",):
        raise ValueError(f"difficulty must be easy, hard or mixed, got {difficulty!r}")
    env = env or EnvConfig()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda i: make_scene(master, i, difficulty, env), range(n)))
    return [make_scene(master, i, difficulty, env) for i in range(n)]


def save_dataset(scenes: Iterable[SceneSpec], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")))
            fh.write("\n")


def load_dataset(path: str | os.PathLike) -> list[SceneSpec]:
    scenes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                scenes.append(SceneSpec.from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return scenes

"""Text protocol between policy and trainer.

A response is ``<think>reasoning</think><answer>[objects]</answer>`` where the
answer holds a JSON list of ``{"bbox":[x1,y1,x2,y2],"point":[x,y]}`` objects
in normalized coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, GeometryError, Point

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
TAGS = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)

REVISION_TEMPLATE = (
    "Question: {question}\n"
    "Your previous answer was:\n"
    "{previous}\n"
    "Re-examine the scene, check whether the referenced objects are correctly localised, "
    "and output a revised answer in the same format."
)


class FormatError(ValueError):
    """Raised by :func:`parse`; any subclass means the format reward is 0."""


class MissingThink(FormatError):
    pass


class MissingAnswer(FormatError):
    pass


class WrongOrder(FormatError):
    pass


class MalformedObjectList(FormatError):
    pass


class CoordinateOutOfRange(FormatError):
    pass


@dataclass(frozen=True)
class Response:
    reasoning_text: str = ""
    boxes: tuple[Box, ...] = ()
    points: tuple[Point, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "points", tuple(self.points))
        if len(self.boxes) != len(self.points):
            raise ValueError("boxes and points must have equal length")
        if any(tag in self.reasoning_text for tag in TAGS):
            raise ValueError("reasoning text may not contain structural tags")

    @property
    def count(self) -> int:
        return len(self.boxes)


@dataclass(frozen=True)
class RevisionQuery:
    original_question: str
    initial_response_text: str
    combined_prompt: str = field(default="")


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def serialize(r: Response) -> str:
    objs = []
    for b, p in zip(r.boxes, r.points):
        bbox = ",".join(_fmt(v) for v in b.as_tuple())
        point = ",".join(_fmt(v) for v in p.as_tuple())
        objs.append(f'{{"bbox":[{bbox}],"point":[{point}]}}')
    return f"{THINK_OPEN}{r.reasoning_text}{THINK_CLOSE}{ANSWER_OPEN}[{','.join(objs)}]{ANSWER_CLOSE}"


def _reject_constant(name: str):
    raise MalformedObjectList(f"non-finite literal {name}")


def _numbers(value, n: int, what: str) -> list[float]:
    if not isinstance(value, list) or len(value) != n:
        raise MalformedObjectList(f"{what} must be a list of {n} numbers")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise MalformedObjectList(f"{what} holds a non-numeric entry {v!r}")
        v = float(v)
        if not math.isfinite(v):
            raise MalformedObjectList(f"{what} holds a non-finite entry")
        if v < 0.0 or v > 1.0:
            raise CoordinateOutOfRange(f"{what} coordinate {v} outside [0, 1]")
        out.append(v)
    return out


def _parse_objects(payload: str) -> tuple[list[Box], list[Point]]:
    try:
        data = json.loads(payload, parse_constant=_reject_constant)
    except (json.JSONDecodeError, RecursionError) as exc:
        raise MalformedObjectList(f"answer is not a valid object list: {exc}") from None
    if not isinstance(data, list):
        raise MalformedObjectList("answer must be a list")
    boxes, points = [], []
    for obj in data:
        if not isinstance(obj, dict) or "bbox" not in obj or set(obj) - {"bbox", "point"}:
            raise MalformedObjectList(f"bad object {obj!r:.60}")
        coords = _numbers(obj["bbox"], 4, "bbox")
        try:
            box = Box(*coords)
        except GeometryError as exc:
            raise MalformedObjectList(str(exc)) from None
        if "point" in obj:
            point = Point(*_numbers(obj["point"], 2, "point"))
        else:
            point = box.center
        boxes.append(box)
        points.append(point)
    return boxes, points


def parse(text: str) -> Response:
    """Parse a response, raising a :class:`FormatError` subclass on failure.

    Objects without a ``point`` get their box center. Text outside the two
    blocks is ignored.
    """
    if not isinstance(text, str):
        raise FormatError("response must be text")
    a_open = text.find(ANSWER_OPEN)
    a_close = text.find(ANSWER_CLOSE, a_open + len(ANSWER_OPEN)) if a_open >= 0 else -1
    if a_open < 0 or a_close < 0:
        raise MissingAnswer("no <answer>...</answer> block")
    t_open = text.find(THINK_OPEN)
    t_close = text.find(THINK_CLOSE, t_open + len(THINK_OPEN)) if t_open >= 0 else -1
    if t_open < 0 or t_close < 0:
        raise MissingThink("no <think>...</think> block")
    if a_open < t_close:
        raise WrongOrder("answer block must follow the think block")
    reasoning = text[t_open + len(THINK_OPEN):t_close]
    if any(tag in reasoning for tag in TAGS):
        raise WrongOrder("nested structural tag inside the think block")
    boxes, points = _parse_objects(text[a_open + len(ANSWER_OPEN):a_close])
    return Response(reasoning, tuple(boxes), tuple(points))


def try_parse(text: str) -> Response | None:
    try:
        return parse(text)
    except FormatError:
        return None


def build_revision_query(q: str, initial: Response) -> RevisionQuery:
    previous = serialize(initial)
    prompt = REVISION_TEMPLATE.format(question=q, previous=previous)
    return RevisionQuery(q, previous, prompt)


def corrupt(text: str, p_corrupt: float, rng: np.random.Generator) -> str:
    """With probability ``p_corrupt`` delete one structural tag occurrence."""
    if not 0.0 <= p_corrupt <= 1.0:
        raise ValueError(f"p_corrupt={p_corrupt} outside [0, 1]")
    if p_corrupt == 0.0 or rng.random() >= p_corrupt:
        return text
    present = [tag for tag in TAGS if tag in text]
    if not present:
        return text
    tag = present[int(rng.integers(len(present)))]
    i = text.find(tag)
    return text[:i] + text[i + len(tag):]

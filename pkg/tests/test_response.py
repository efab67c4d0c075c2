from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grouprev.geometry import Box, Point
from grouprev.response import (
    REVISION_TEMPLATE,
    CoordinateOutOfRange,
    FormatError,
    MalformedObjectList,
    MissingAnswer,
    MissingThink,
    Response,
    WrongOrder,
    build_revision_query,
    corrupt,
    parse,
    serialize,
    try_parse,
)
from oracles import fuzz_parse, random_response, round_trip_error

GOLDEN = Path(__file__).parent / "golden"


def test_serialize_empty():
    assert serialize(Response("t")) == "<think>t</think><answer>[]</answer>"


def test_serialize_one_object():
    r = Response("t", (Box(0.1, 0.2, 0.3, 0.4),), (Point(0.2, 0.3),))
    assert serialize(r) == (
        '<think>t</think><answer>[{"bbox":[0.100000,0.200000,0.300000,0.400000],'
        '"point":[0.200000,0.300000]}]</answer>'
    )


def test_golden_serialization():
    r = Response(
        "two mugs on the left",
        (Box(0.0, 0.0, 0.5, 0.5), Box(0.125, 0.25, 1.0, 0.75)),
        (Point(0.25, 0.25), Point(1 / 3, 0.5)),
    )
    golden = (GOLDEN / "response_two_objects.txt").read_text(encoding="utf-8")
    assert serialize(r) == golden
    assert parse(golden) == Response(r.reasoning_text, r.boxes, (Point(0.25, 0.25), Point(0.333333, 0.5)))


def test_missing_point_defaults_to_center():
    r = parse('<think></think><answer>[{"bbox":[0.2,0.2,0.6,0.4]}]</answer>')
    assert r.points[0].as_tuple() == pytest.approx((0.4, 0.3))


def test_text_outside_blocks_is_ignored():
    r = parse('preamble <think>x</think> gap <answer>[]</answer> trailer')
    assert r.reasoning_text == "x" and r.count == 0


@pytest.mark.parametrize("text, err", [
    ("<answer>[]</answer><think>t</think>", WrongOrder),
    ("<think>t</think>", MissingAnswer),
    ("<think>t</think><answer>[]", MissingAnswer),
    ("<answer>[]</answer>", MissingThink),
    ("<think>t<answer>[]</answer>", MissingThink),
    ("<think>a<think>b</think><answer>[]</answer>", WrongOrder),
    ('<think></think><answer>[{"bbox":[0.1,0.2,0.3]}]</answer>', MalformedObjectList),
    ('<think></think><answer>[{"bbox":[0.1,0.2,0.3,0.4,0.5]}]</answer>', MalformedObjectList),
    ('<think></think><answer>[{"bbox":"0.1,0.2,0.3,0.4"}]</answer>', MalformedObjectList),
    ('<think></think><answer>[{"bbox":[0.1,0.2,0.3,true]}]</answer>', MalformedObjectList),
    ('<think></think><answer>[{"bbox":[0.1,0.2,0.3,NaN]}]</answer>', MalformedObjectList),
    ('<think></think><answer>[{"bbox":[0.1,0.2,0.3,Infinity]}]</answer>', MalformedObjectList),
    ('<think></think><answer>[{"bbox":[0.5,0.2,0.3,0.4]}]</answer>', MalformedObjectList),
    ('<think></think><answer>[{"bbox":[0.1,0.2,0.3,0.4],"point":[0.1]}]</answer>', MalformedObjectList),
    ('<think></think><answer>[{"bbox":[0.1,0.2,0.3,0.4],"label":"x"}]</answer>', MalformedObjectList),
    ('<think></think><answer>[{"point":[0.1,0.2]}]</answer>', MalformedObjectList),
    ('<think></think><answer>{"bbox":[0.1,0.2,0.3,0.4]}</answer>', MalformedObjectList),
    ('<think></think><answer>[0.1,0.2]</answer>', MalformedObjectList),
    ("<think></think><answer>[</answer>", MalformedObjectList),
    ("<think></think><answer></answer>", MalformedObjectList),
    ('<think></think><answer>[{"bbox":[0.1,0.2,1.3,0.4]}]</answer>', CoordinateOutOfRange),
    ('<think></think><answer>[{"bbox":[-0.1,0.2,0.3,0.4]}]</answer>', CoordinateOutOfRange),
    ('<think></think><answer>[{"bbox":[0.1,0.2,0.3,0.4],"point":[0.2,1.5]}]</answer>', CoordinateOutOfRange),
])
def test_malformation_corpus(text, err):
    with pytest.raises(err):
        parse(text)
    assert try_parse(text) is None


def test_non_text_input():
    with pytest.raises(FormatError):
        parse(b"<think></think>")


def test_response_rejects_tags_in_reasoning():
    with pytest.raises(ValueError):
        Response("a</think>b")
    with pytest.raises(ValueError):
        Response("", (Box(0, 0, 1, 1),), ())


def test_fuzz_small():
    fuzz_parse(5000, 1)


def test_round_trip_small():
    assert round_trip_error(1000, 2) <= 5e-7


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=80))
def test_parse_total_on_arbitrary_text(s):
    try:
        parse(s)
    except FormatError:
        pass


def test_revision_query():
    r = Response("t", (Box(0.1, 0.2, 0.3, 0.4),), (Point(0.2, 0.3),))
    q = "the red mug"
    a = build_revision_query(q, r)
    b = build_revision_query(q, r)
    assert a == b
    assert a.original_question == q
    assert a.initial_response_text == serialize(r)
    assert a.combined_prompt == REVISION_TEMPLATE.format(question=q, previous=serialize(r))
    assert a.combined_prompt.startswith("Question: the red mug\nYour previous answer was:\n")
    assert "[0.100000,0.200000,0.300000,0.400000]" in a.combined_prompt


def test_revision_query_embeds_boxes(rng):
    for _ in range(200):
        r = random_response(rng)
        prompt = build_revision_query("q", r).combined_prompt
        for b in r.boxes:
            assert ",".join(f"{v:.6f}" for v in b.as_tuple()) in prompt


def test_corrupt_identity_at_zero(rng):
    text = serialize(Response("t"))
    state = rng.bit_generator.state
    assert corrupt(text, 0.0, rng) == text
    assert rng.bit_generator.state == state


def test_corrupt_always_breaks_at_one(rng):
    for _ in range(500):
        text = serialize(random_response(rng))
        with pytest.raises(FormatError):
            parse(corrupt(text, 1.0, rng))


def test_corrupt_reproducible():
    text = serialize(Response("t", (Box(0, 0, 1, 1),), (Point(0.5, 0.5),)))
    a = [corrupt(text, 0.5, np.random.default_rng(3)) for _ in range(3)]
    seq1 = [corrupt(text, 0.5, r) for r in [np.random.default_rng(9)] * 20]
    seq2 = [corrupt(text, 0.5, r) for r in [np.random.default_rng(9)] * 20]
    assert a[0] == a[1] == a[2]
    assert seq1 == seq2
    assert len(set(seq1)) > 1


def test_corrupt_rejects_bad_probability(rng):
    with pytest.raises(ValueError):
        corrupt("x", 1.5, rng)

import json

import numpy as np
import pytest

from grouprev.policy import prior_params
from grouprev.scenes import (
    DISTRACTOR_RATIO,
    DatasetError,
    EnvConfig,
    SceneSpec,
    anchor_grid,
    generate_dataset,
    generate_scene,
    grid_for,
    load_dataset,
    make_scene,
    save_dataset,
    scene_seed,
)
from grouprev.trainer import SUCCESS_IOU, TrainConfig, rollout


def test_anchor_counts():
    assert anchor_grid(2, [0.5]).num_anchors == 4
    assert anchor_grid(10, [0.1, 0.2, 0.4]).num_anchors == 300
    assert grid_for(EnvConfig()).num_anchors == 128


def test_anchor_layout():
    g = anchor_grid(4, [0.2, 0.5])
    for (box, point), pos in zip(g.cells, g.positions):
        assert point == box.center
    k = g.index(1, 2, 1)
    assert g.boxes[k].tolist() == pytest.approx([0.375 - 0.25, 0.625 - 0.25, 0.375 + 0.25, 0.625 + 0.25])
    # clamped at the border
    assert g.boxes[g.index(0, 0, 1)].tolist() == pytest.approx([0.0, 0.0, 0.375, 0.375])


@pytest.mark.parametrize("g, scales", [(1, [0.5]), (2.5, [0.5]), (3, []), (3, [0.0]), (3, [1.2])])
def test_anchor_grid_rejects(g, scales):
    with pytest.raises(ValueError):
        anchor_grid(g, scales)


def test_env_config_roundtrip_and_validation():
    env = EnvConfig(grid=5, scales=(0.2,), max_objects=2)
    assert EnvConfig.from_dict(env.to_dict()) == env
    assert env.config_hash() == EnvConfig.from_dict(env.to_dict()).config_hash()
    assert env.config_hash() != EnvConfig().config_hash()
    with pytest.raises(ValueError):
        EnvConfig.from_dict({**env.to_dict(), "gird": 3})
    assert EnvConfig().problems() == []
    assert len(EnvConfig(grid=1, scales=(), max_objects=0).problems()) == 3


def test_scene_seed_rule():
    import hashlib
    d = hashlib.sha256(b"7:3").digest()
    assert scene_seed(7, 3) == int.from_bytes(d[:8], "little")
    assert scene_seed(7, 3) != scene_seed(3, 7)


def test_generation_deterministic():
    a = generate_dataset(11, 30, "mixed")
    b = generate_dataset(11, 30, "mixed")
    assert a == b
    assert [s.to_record() for s in a] == [s.to_record() for s in b]
    assert generate_dataset(11, 30, "mixed", threads=3) == a
    assert {s.difficulty for s in a} == {"easy", "hard"}
    assert make_scene(11, 4, "mixed", EnvConfig()) == a[4]


def test_scene_invariants():
    env = EnvConfig()
    for s in generate_dataset(2, 300, "mixed"):
        assert 1 <= s.num_objects <= env.max_objects
        assert all(b.contains(p) for b, p in zip(s.gt_boxes, s.gt_points))
        assert min(s.descriptor) >= 0
        assert len(s.descriptor) == env.num_anchors + 1


def test_jitter_bounded():
    grid = grid_for(EnvConfig())
    cell = 1.0 / grid.g
    for s in generate_dataset(3, 200, "easy"):
        best = s.anchor_costs.argmin(axis=0)
        for b, k in zip(s.gt_boxes, best):
            shift = np.abs(np.array(b.as_tuple()) - grid.boxes[k])
            assert shift.max() <= 0.25 * cell + 1e-12


def test_easy_sharp_limit_recovers_targets():
    env = EnvConfig()
    grid = grid_for(env)
    for i in range(200):
        rng = np.random.default_rng(i)
        s = generate_scene(rng, "easy", grid, env.max_objects, env=env, temperature=1e-3)
        n = s.num_objects
        top = set(np.argsort(-s.descriptor_array[:-1])[:n].tolist())
        assert top == set(s.anchor_costs.argmin(axis=0).tolist())


def test_hard_distractor_strength():
    grid = grid_for(EnvConfig())
    for s in generate_dataset(4, 300, "hard"):
        d = s.descriptor_array[:-1]
        targets = s.anchor_costs.argmin(axis=0)
        others = np.setdiff1d(np.arange(len(d)), targets)
        cheb = np.max(np.abs(grid.positions[others][:, None] - grid.positions[targets][None]), axis=2).min(axis=1)
        adjacent = others[cheb == 1]
        assert d[adjacent].max() >= DISTRACTOR_RATIO * d[targets].min()


def test_count_cue():
    for s in generate_dataset(8, 200, "mixed"):
        cue = s.descriptor[-1]
        if s.difficulty == "easy":
            assert cue == s.num_objects
        else:
            assert 0.45 * s.num_objects <= cue <= 0.75 * s.num_objects


def test_reviewed_descriptor():
    s = generate_dataset(9, 1, "hard")[0]
    assert np.array_equal(s.reviewed_descriptor([]), s.descriptor_array)
    target = int(s.anchor_costs[:, 0].argmin())
    r = s.reviewed_descriptor([target])
    assert r[-1] == s.descriptor[-1]
    near = r[:-1] != s.descriptor_array[:-1]
    assert near[target]
    assert int(np.argmax(np.where(near, r[:-1], -1))) in set(s.anchor_costs.argmin(axis=0).tolist())


def test_save_load_round_trip(tmp_path):
    empty = tmp_path / "empty.jsonl"
    save_dataset([], empty)
    assert empty.read_text() == ""
    assert load_dataset(empty) == []
    scenes = generate_dataset(12, 1000, "mixed")
    path = tmp_path / "d.jsonl"
    save_dataset(scenes, path)
    assert len(path.read_text().splitlines()) == 1000
    back = load_dataset(path)
    assert back == scenes
    assert all(a.descriptor == b.descriptor for a, b in zip(scenes, back))


def test_load_reports_line_number(tmp_path):
    scenes = generate_dataset(12, 3, "easy")
    path = tmp_path / "d.jsonl"
    save_dataset(scenes, path)
    lines = path.read_text().splitlines()
    bad = json.loads(lines[1])
    del bad["seed"]
    path.write_text("\n".join([lines[0], json.dumps(bad), lines[2]]) + "\n")
    with pytest.raises(DatasetError, match=r"d\.jsonl:2"):
        load_dataset(path)
    path.write_text(lines[0] + "\n{not json\n")
    with pytest.raises(DatasetError, match=r":2"):
        load_dataset(path)


def test_scene_validation():
    s = generate_dataset(1, 1, "easy")[0]
    rec = s.to_record()
    assert SceneSpec.from_record(rec) == s
    with pytest.raises(ValueError):
        SceneSpec.from_record({**rec, "v": 2})
    with pytest.raises(ValueError):
        SceneSpec.from_record({**rec, "descriptor": rec["descriptor"][:-1]})
    with pytest.raises(ValueError):
        SceneSpec.from_record({**rec, "difficulty": "medium"})


def _zero_shot_success(scenes, seed):
    params = prior_params(scenes[0].env)
    cfg = TrainConfig(revision_enabled=False)
    hits = [rollout(s, params, cfg, np.random.default_rng([seed, i])).best_iou > SUCCESS_IOU
            for i, s in enumerate(scenes)]
    return float(np.mean(hits))


def test_hard_tier_suppresses_zero_shot_success():
    for seed in range(10):
        easy = _zero_shot_success(generate_dataset(1000 + seed, 60, "easy"), seed)
        hard = _zero_shot_success(generate_dataset(1000 + seed, 60, "hard"), seed)
        assert hard < easy, (seed, hard, easy)

import math

import numpy as np
import pytest

from grouprev.policy import PolicyParams, log_softmax, prior_params
from grouprev.reward import group_advantages
from grouprev.scenes import EnvConfig, generate_dataset
from grouprev.trainer import (
    NonFiniteError,
    TrainConfig,
    evaluate,
    revision_gain,
    rollout,
    shaping_entry,
    surrogate_and_grad,
    surrogate_stats,
    train,
    update,
)
from oracles import TINY, baseline_reduction_violations, gradient_check_errors, oracle_params

FAST = dict(batch_size=4, group_size=4)


@pytest.fixture(scope="module")
def small_data():
    env = EnvConfig(grid=4, scales=(0.3,), max_objects=2, max_slots=3)
    return generate_dataset(41, 30, "hard", env=env)


def test_config_validation():
    assert TrainConfig().problems() == []
    bad = TrainConfig(group_size=1, clip_epsilon=1.0, kl_beta=-1, omega=-1, old_policy_refresh_interval=0)
    assert len(bad.problems()) == 5
    with pytest.raises(ValueError):
        bad.validate()
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 0.1})
    cfg = TrainConfig(seed=3, omega=7.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig(consolidation_enabled=False).effective_omega == 0.0


def test_baseline_reduction():
    assert baseline_reduction_violations(100, 7) == 0


def test_revision_rollout_shapes(hard_scenes):
    p = prior_params(hard_scenes[0].env)
    rec = rollout(hard_scenes[0], p, TrainConfig(), np.random.default_rng(0))
    assert len(rec.candidates) == len(rec.rewards) == len(rec.shaping) == 8
    assert rec.revision_round and not rec.fallback
    totals = [r.total for r in rec.rewards]
    assert rec.mu == pytest.approx(np.mean(totals)) and rec.sigma == pytest.approx(np.std(totals))
    for r, s in zip(rec.rewards, rec.shaping):
        assert r.total == pytest.approx(r.r_format + r.r_acc + 5.0 * s.delta_phi)
        assert r.scaled_advantage == pytest.approx((1 + s.delta_phi) * r.advantage)
        assert s.phi_initial == rec.shaping[0].phi_initial
    np.testing.assert_allclose([r.advantage for r in rec.rewards], group_advantages(totals))


def test_mode_flags(hard_scenes):
    p = prior_params(hard_scenes[0].env)
    s = hard_scenes[1]
    no_cons = rollout(s, p, TrainConfig(consolidation_enabled=False), np.random.default_rng(1))
    assert all(r.omega == 0 and r.total == r.r_format + r.r_acc for r in no_cons.rewards)
    no_scale = rollout(s, p, TrainConfig(postscale_enabled=False), np.random.default_rng(1))
    assert all(r.scaled_advantage == r.advantage for r in no_scale.rewards)


def test_corruption_forces_fallback(hard_scenes):
    p = prior_params(hard_scenes[0].env)
    cfg = TrainConfig(p_corrupt=1.0)
    for i, s in enumerate(hard_scenes[:20]):
        rec = rollout(s, p, cfg, np.random.default_rng(i))
        assert rec.fallback and not rec.revision_round
        assert all(sh.delta_phi == 0.0 for sh in rec.shaping)


def test_candidate_corruption_zeroes_format(hard_scenes):
    p = prior_params(hard_scenes[0].env)
    rec = rollout(hard_scenes[2], p, TrainConfig(p_corrupt_candidates=1.0), np.random.default_rng(2))
    assert rec.revision_round
    for r, sh in zip(rec.rewards, rec.shaping):
        assert r.r_format == 0.0 and r.r_acc == 0.0 and sh.phi_revised == 1.0 and sh.delta_phi == 0.0


def _records(data, params, cfg, seed=0):
    return [rollout(s, params, cfg, np.random.default_rng([seed, i])) for i, s in enumerate(data)]


def test_ratio_one_objective(small_data):
    env = small_data[0].env
    p = prior_params(env)
    ref = PolicyParams(p.theta + np.random.default_rng(0).normal(scale=0.2, size=p.theta.shape), env)
    cfg = TrainConfig(kl_beta=0.3, **FAST)
    recs = _records(small_data[:5], p, cfg)
    stats = surrogate_stats(p, p, ref, recs, cfg)
    expected = 0.0
    for rec in recs:
        logp = log_softmax(rec.context @ p.theta)
        logq = log_softmax(rec.context @ ref.theta)
        kl_slot = np.sum(np.exp(logp) * (logp - logq), axis=1)
        kls = [sum(kl_slot[s] for s in range(min(len(t.choices), env.max_slots))) for t in rec.candidates]
        expected += np.mean(rec.advantages - cfg.kl_beta * np.array(kls)) / len(recs)
    assert stats.objective == pytest.approx(expected, abs=1e-12)
    assert stats.clip_fraction == 0.0


def test_clipped_candidate_has_zero_surrogate_gradient(small_data):
    env = small_data[0].env
    old = prior_params(env)
    cfg = TrainConfig(kl_beta=0.0, group_size=2, batch_size=1)
    rng = np.random.default_rng(5)
    for i, s in enumerate(small_data):
        rec = rollout(s, old, cfg, np.random.default_rng(i))
        adv = rec.advantages
        if adv.max() <= 0.1:
            continue
        j = int(np.argmax(adv))
        # push the favoured candidate's probability far up so its ratio exceeds 1 + eps
        cur = old.copy()
        tr = rec.candidates[j]
        for slot, a in enumerate(tr.choices[:env.max_slots]):
            cur.theta[env.num_actions + slot, a] += 3.0
        ratio = [math.exp(sum(log_softmax(rec.context @ th)[k, a] for k, a in enumerate(t.choices[:env.max_slots]))
                          - sum(log_softmax(rec.context @ old.theta)[k, a] for k, a in enumerate(t.choices[:env.max_slots])))
                 for th, t in ((cur.theta, rec.candidates[j]),)]
        assert ratio[0] > 1 + cfg.clip_epsilon
        only_j = rec.__class__(**{**rec.__dict__, "candidates": [tr], "rewards": [rec.rewards[j]],
                                  "shaping": [rec.shaping[j]]})
        _, g = surrogate_and_grad(cur, old, old, [only_j], cfg)
        assert np.all(g == 0.0)
        return
    pytest.skip("no candidate with a clear positive advantage")


def test_surrogate_gradient_matches_finite_differences():
    errors = gradient_check_errors(10, 3)
    assert max(errors) < 1e-4


def test_kl_term_moves_objective_exactly(small_data):
    env = small_data[0].env
    p = prior_params(env)
    ref = PolicyParams(p.theta + 0.1, env)
    ref.theta[:, 0] += 0.4
    recs = _records(small_data[:3], p, TrainConfig(**FAST))
    a = surrogate_stats(p, p, ref, recs, TrainConfig(kl_beta=0.0, **FAST))
    b = surrogate_stats(p, p, ref, recs, TrainConfig(kl_beta=0.5, **FAST))
    assert a.objective - b.objective == pytest.approx(0.5 * b.mean_kl, rel=1e-12)


def test_update_rules():
    env = TINY
    p = PolicyParams(np.random.default_rng(1).normal(size=(env.num_features, env.num_actions)), env)
    zero = np.zeros_like(p.theta)
    cfg0 = TrainConfig(weight_decay=0.0, learning_rate=0.2)
    assert np.array_equal(update(p, zero, cfg0).theta, p.theta)
    g = np.random.default_rng(2).normal(size=p.theta.shape)
    half = TrainConfig(weight_decay=0.0, learning_rate=0.1)
    twice = update(update(p, g, half), g, half)
    np.testing.assert_allclose(twice.theta, update(p, g, cfg0).theta, atol=1e-15)
    decay = TrainConfig(weight_decay=0.5, learning_rate=0.1)
    np.testing.assert_allclose(update(p, zero, decay).theta, p.theta * 0.95)
    anchor = PolicyParams(p.theta + 1.0, env)
    np.testing.assert_allclose(update(p, zero, decay, anchor=anchor).theta, p.theta + 0.05)
    bad = g.copy()
    bad[0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        update(p, bad, cfg0)
    with pytest.raises(ValueError):
        update(p, g[:-1], cfg0)


def test_train_deterministic(small_data):
    cfg = TrainConfig(steps=6, seed=4, **FAST)
    a = train(cfg, small_data)
    b = train(cfg, small_data)
    assert a.metrics == b.metrics and a.shaping == b.shaping
    assert np.array_equal(a.params.theta, b.params.theta)
    c = train(cfg, small_data, threads=3)
    assert c.metrics == a.metrics and np.array_equal(c.params.theta, a.params.theta)


def test_train_zero_steps(small_data):
    r = train(TrainConfig(steps=0), small_data)
    assert r.metrics == [] and np.array_equal(r.params.theta, prior_params(small_data[0].env).theta)


def test_metrics_stream(small_data):
    seen, ckpts = [], []
    cfg = TrainConfig(steps=5, checkpoint_interval=2, **FAST)
    r = train(cfg, small_data, on_step=lambda m, s: seen.append(m),
              on_checkpoint=lambda step, p, st: ckpts.append(step))
    assert len(r.metrics) == 5 and seen == r.metrics and ckpts == [2, 4]
    keys = {"step", "mean_r_format", "mean_r_acc", "mean_delta_phi", "mean_reward", "mean_kl",
            "frac_group_best_iou_above_0.5", "clip_fraction"}
    assert keys <= set(r.metrics[0])
    assert [m["step"] for m in r.metrics] == [1, 2, 3, 4, 5]


def test_train_rejects_bad_input(small_data):
    with pytest.raises(ValueError):
        train(TrainConfig(), [])
    mixed = small_data[:2] + generate_dataset(1, 1, "easy")
    with pytest.raises(ValueError):
        train(TrainConfig(steps=1), mixed)


def test_shaping_entry_uses_revision_groups(small_data):
    p = prior_params(small_data[0].env)
    recs = _records(small_data[:4], p, TrainConfig(**FAST))
    e = shaping_entry(9, recs)
    assert e["step"] == 9 and len(e["group_mean"]) == 4
    assert all(m <= x for m, x in zip(e["group_mean"], e["group_max"]))


def test_oracle_evaluation():
    scenes = generate_dataset(51, 60, "easy")
    hits = objects = counted = 0
    for i, s in enumerate(scenes):
        rep = evaluate(oracle_params(s), [s], np.random.default_rng(i))
        hits += rep.acc_at_0_5 * rep.n_objects
        objects += rep.n_objects
        counted += rep.count_acc
    assert hits == objects
    assert counted == len(scenes)


def test_untrained_hard_below_easy():
    env = EnvConfig()
    p = prior_params(env)
    hard = evaluate(p, generate_dataset(61, 200, "hard"), np.random.default_rng(0))
    easy = evaluate(p, generate_dataset(61, 200, "easy"), np.random.default_rng(0))
    assert hard.acc_at_0_5 < easy.acc_at_0_5


def test_empty_evaluation():
    rep = evaluate(prior_params(EnvConfig()), [], np.random.default_rng(0))
    assert rep.n_scenes == 0 and rep.acc_at_0_5 is None and rep.per_tier == {}


def test_evaluation_per_tier():
    data = generate_dataset(71, 40, "mixed")
    rep = evaluate(prior_params(data[0].env), data, np.random.default_rng(0))
    assert set(rep.per_tier) == {"easy", "hard"}
    assert sum(t.n_scenes for t in rep.per_tier.values()) == 40
    d = rep.to_dict()
    assert {"mean_iou", "acc_at_0.5", "count_acc", "mean_phi", "per_tier"} <= set(d)


def test_revision_gain_on_hard_scenes(hard_scenes):
    rev, direct = revision_gain(prior_params(hard_scenes[0].env), hard_scenes, 8, 0)
    assert rev >= direct

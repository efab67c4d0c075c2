"""Two-round rollouts, consolidation and the clipped KL-regularized update."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .consolidation import ShapingRecord, alignment_cost_from_costs, shaping_signal
from .geometry import iou_matrix
from .policy import (ActionTrace, PolicyParams, categorical_kl, initial_summary, log_softmax,
                     prior_params, sample_traces, slot_features, trace_to_response)
from .response import corrupt, serialize, try_parse
from .reward import RewardBreakdown, group_advantages, post_scale, total_reward
from .scenes import EnvConfig, SceneSpec, grid_for

log = logging.getLogger(__name__)

SUCCESS_IOU = 0.5


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    group_size: int = 8
    omega: float = 5.0
    clip_epsilon: float = 0.2
    kl_beta: float = 0.01
    # The 7B setting uses 1e-6; a 128-anchor linear policy needs a far larger step.
    learning_rate: float = 1e-2
    weight_decay: float = 0.01
    steps: int = 200
    batch_size: int = 64
    old_policy_refresh_interval: int = 2
    revision_enabled: bool = True
    consolidation_enabled: bool = True
    postscale_enabled: bool = True
    p_corrupt: float = 0.0
    p_corrupt_candidates: float = 0.0
    seed: int = 0
    prior_gain: float = 5.0
    prior_count_slope: float = 5.0
    checkpoint_interval: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.group_size < 2:
            out.append(f"group_size must be >= 2 (got {self.group_size})")
        if not 0.0 < self.clip_epsilon < 1.0:
            out.append(f"clip_epsilon must be in (0, 1) (got {self.clip_epsilon})")
        if self.kl_beta < 0:
            out.append(f"kl_beta must be >= 0 (got {self.kl_beta})")
        if self.omega < 0:
            out.append(f"omega must be >= 0 (got {self.omega})")
        if self.learning_rate <= 0:
            out.append(f"learning_rate must be > 0 (got {self.learning_rate})")
        if self.weight_decay < 0:
            out.append(f"weight_decay must be >= 0 (got {self.weight_decay})")
        if self.steps < 0:
            out.append(f"steps must be >= 0 (got {self.steps})")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.old_policy_refresh_interval < 1:
            out.append(f"old_policy_refresh_interval must be >= 1 (got {self.old_policy_refresh_interval})")
        for name in ("p_corrupt", "p_corrupt_candidates"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                out.append(f"{name} must be in [0, 1] (got {v})")
        if self.checkpoint_interval < 0:
            out.append(f"checkpoint_interval must be >= 0 (got {self.checkpoint_interval})")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))
        return self

    @property
    def effective_omega(self) -> float:
        return self.omega if self.consolidation_enabled else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RolloutRecord:
    scene_id: str
    context: np.ndarray                  # (S, F) feature rows the candidates were sampled under
    revision_round: bool
    fallback: bool
    initial_trace: ActionTrace | None
    initial_text: str
    candidates: list[ActionTrace]
    shaping: list[ShapingRecord]
    rewards: list[RewardBreakdown]
    mu: float
    sigma: float
    candidate_ious: list[float] = field(default_factory=list)

    @property
    def best_iou(self) -> float:
        return max(self.candidate_ious)

    @property
    def advantages(self) -> np.ndarray:
        return np.array([r.scaled_advantage for r in self.rewards])


def _matched_iou(scene: SceneSpec, anchors: Sequence[int], assignment) -> float:
    """Mean IoU over every matched pair; dummy pairs count as 0."""
    if not anchors:
        return 0.0
    ious = _anchor_ious(scene)
    total = sum(ious[anchors[i], j] for i, j in assignment.pairs if assignment.is_real((i, j)))
    return total / len(assignment)


def _anchor_ious(scene: SceneSpec) -> np.ndarray:
    cached = scene.__dict__.get("_anchor_ious")
    if cached is None:
        cached = iou_matrix(grid_for(scene.env).boxes, scene.gt_box_array)
        scene.__dict__["_anchor_ious"] = cached
    return cached


class _Scorer:
    """Alignment cost and matched IoU of anchor sets, memoized per scene."""

    def __init__(self, scene: SceneSpec):
        self.scene = scene
        self.costs = scene.anchor_costs
        self._memo: dict[tuple[int, ...], tuple[float, float, object]] = {}

    def __call__(self, anchors: Sequence[int]):
        key = tuple(sorted(anchors))
        hit = self._memo.get(key)
        if hit is None:
            phi, assignment = alignment_cost_from_costs(self.costs[list(key)])
            hit = (phi, _matched_iou(self.scene, key, assignment), assignment)
            self._memo[key] = hit
        return hit


def rollout(scene: SceneSpec, old_params: PolicyParams, config: TrainConfig,
            rng: np.random.Generator) -> RolloutRecord:
    """Sample an initial response and a group of revisions (or a plain group).

    A format failure of the initial response, or disabled revision, falls
    back to a plain group drawn from the original context with no shaping.
    """
    env = scene.env
    fm1 = slot_features(scene, False)
    logp1 = log_softmax(fm1 @ old_params.theta)
    init = sample_traces(logp1, 1, rng)[0]
    text = corrupt(serialize(trace_to_response(init, env)), config.p_corrupt, rng)
    parsed = try_parse(text) is not None
    use_revision = config.revision_enabled and parsed

    if use_revision:
        context = slot_features(scene, True, initial_summary(init.choices, env))
        logp = log_softmax(context @ old_params.theta)
    else:
        context, logp = fm1, logp1
    traces = sample_traces(logp, config.group_size, rng)

    score = _Scorer(scene)
    phi1 = score(init.anchors)[0] if use_revision else None
    omega = config.effective_omega
    shaping, partial, ious = [], [], []
    for tr in traces:
        if config.p_corrupt_candidates > 0.0:
            ctext = corrupt(serialize(trace_to_response(tr, env)), config.p_corrupt_candidates, rng)
            ok = try_parse(ctext) is not None
        else:
            # an uncorrupted serialized response always parses
            ok = True
        phi2, miou, assignment = score(tr.anchors if ok else ())
        if use_revision:
            rec = ShapingRecord(phi1, phi2, shaping_signal(phi1, phi2), assignment)
        else:
            rec = ShapingRecord(phi2, phi2, 0.0, assignment)
        shaping.append(rec)
        ious.append(miou)
        r_format = 1.0 if ok else 0.0
        r_acc = 1.0 - phi2
        partial.append((r_format, r_acc, rec.delta_phi))

    totals = [total_reward(f, a, d, omega) for f, a, d in partial]
    adv = group_advantages(totals)
    rewards = []
    for (f, a, d), t, ai in zip(partial, totals, adv.tolist()):
        scaled = post_scale(ai, d) if config.postscale_enabled else ai
        rewards.append(RewardBreakdown(f, a, d, omega, t, ai, scaled))
    arr = np.asarray(totals)
    return RolloutRecord(
        scene_id=scene.id,
        context=context,
        revision_round=use_revision,
        fallback=config.revision_enabled and not parsed,
        initial_trace=init,
        initial_text=text,
        candidates=traces,
        shaping=shaping,
        rewards=rewards,
        mu=float(arr.mean()),
        sigma=float(arr.std()),
        candidate_ious=ious,
    )


@dataclass
class SurrogateStats:
    objective: float
    grad: np.ndarray
    clip_fraction: float
    mean_kl: float


def _trace_index(traces: Sequence[ActionTrace], n_slots: int):
    cand, slot, act = [], [], []
    for i, tr in enumerate(traces):
        n = min(len(tr.choices), n_slots)
        cand.extend([i] * n)
        slot.extend(range(n))
        act.extend(tr.choices[:n])
    return np.array(cand), np.array(slot), np.array(act)


def surrogate_stats(params: PolicyParams, old_params: PolicyParams, ref_params: PolicyParams,
                    records: Sequence[RolloutRecord], config: TrainConfig) -> SurrogateStats:
    theta = params.theta
    grad = np.zeros_like(theta)
    if not records:
        return SurrogateStats(0.0, grad, 0.0, 0.0)
    eps, beta = config.clip_epsilon, config.kl_beta
    n_batch = len(records)
    objective = 0.0
    clipped_count = 0
    n_cand = 0
    kl_sum = 0.0
    for rec in records:
        fm = rec.context
        if fm.shape[1] != theta.shape[0]:
            raise ValueError(f"record features {fm.shape[1]} do not match theta rows {theta.shape[0]}")
        n_slots = fm.shape[0]
        g = len(rec.candidates)
        logp = log_softmax(fm @ theta)
        logp_old = log_softmax(fm @ old_params.theta)
        logq = log_softmax(fm @ ref_params.theta)
        p = np.exp(logp)
        kl_s = np.maximum(categorical_kl(logp, logq), 0.0)

        cand, slot, act = _trace_index(rec.candidates, n_slots)
        lp = np.bincount(cand, weights=logp[slot, act], minlength=g)
        lp_old = np.bincount(cand, weights=logp_old[slot, act], minlength=g)
        kl_i = np.bincount(cand, weights=kl_s[slot], minlength=g)
        ratio = np.exp(lp - lp_old)
        if config.postscale_enabled:
            adv = np.array([r.scaled_advantage for r in rec.rewards])
        else:
            adv = np.array([r.advantage for r in rec.rewards])
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
        surrogate = np.minimum(unclipped, clipped)
        active = unclipped <= clipped
        objective += float(np.mean(surrogate - beta * kl_i)) / n_batch

        scale = 1.0 / (g * n_batch)
        coef = np.where(active, unclipped, 0.0) * scale
        dz = np.zeros_like(logp)
        np.add.at(dz, (slot, act), coef[cand])
        dz -= np.bincount(slot, weights=coef[cand], minlength=n_slots)[:, None] * p
        uses = np.bincount(slot, minlength=n_slots)
        dkl = p * (logp - logq) - p * kl_s[:, None]
        dz -= beta * scale * uses[:, None] * dkl
        grad += fm.T @ dz

        clipped_count += int(np.sum(~active))
        n_cand += g
        kl_sum += float(kl_i.sum())
    return SurrogateStats(objective, grad, clipped_count / n_cand, kl_sum / n_cand)


def surrogate_and_grad(params: PolicyParams, old_params: PolicyParams, ref_params: PolicyParams,
                       records: Sequence[RolloutRecord], config: TrainConfig) -> tuple[float, np.ndarray]:
    """Clipped importance-weighted objective minus the KL penalty, with its gradient.

    Averaged over the candidates of each group and over the batch.
    """
    s = surrogate_stats(params, old_params, ref_params, records, config)
    return s.objective, s.grad


def update(params: PolicyParams, gradient: np.ndarray, config: TrainConfig,
           anchor: PolicyParams | None = None) -> PolicyParams:
    """One ascent step with decoupled weight decay.

    Decay pulls toward ``anchor`` when given (training passes the frozen
    reference so the prior is not eroded), otherwise toward zero.
    """
    if gradient.shape != params.theta.shape:
        raise ValueError(f"gradient shape {gradient.shape} != theta shape {params.theta.shape}")
    if not np.all(np.isfinite(gradient)):
        bad = int(np.sum(~np.isfinite(gradient)))
        raise NonFiniteError(f"gradient has {bad} non-finite entries; step aborted")
    lr = config.learning_rate
    target = 0.0 if anchor is None else anchor.theta
    theta = params.theta + lr * gradient - lr * config.weight_decay * (params.theta - target)
    return PolicyParams(theta, params.env)


def _rollouts(scenes, params, config, seeds, threads):
    def one(args):
        scene, seed = args
        return rollout(scene, params, config, np.random.default_rng(seed))

    jobs = list(zip(scenes, seeds))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def step_metrics(step: int, records: Sequence[RolloutRecord], stats: SurrogateStats) -> dict:
    rewards = [r for rec in records for r in rec.rewards]
    dphi = [s.delta_phi for rec in records for s in rec.shaping]
    return {
        "step": step,
        "mean_r_format": float(np.mean([r.r_format for r in rewards])),
        "mean_r_acc": float(np.mean([r.r_acc for r in rewards])),
        "mean_delta_phi": float(np.mean(dphi)),
        "mean_reward": float(np.mean([r.total for r in rewards])),
        "mean_kl": stats.mean_kl,
        "frac_group_best_iou_above_0.5": float(np.mean([rec.best_iou > SUCCESS_IOU for rec in records])),
        "clip_fraction": stats.clip_fraction,
        "fallback_fraction": float(np.mean([rec.fallback for rec in records])),
        "objective": stats.objective,
    }


def shaping_entry(step: int, records: Sequence[RolloutRecord]) -> dict:
    """Group-wise mean and max of the shaping signal over revision groups."""
    groups = [[s.delta_phi for s in rec.shaping] for rec in records if rec.revision_round]
    return {
        "step": step,
        "group_mean": [float(np.mean(g)) for g in groups],
        "group_max": [float(np.max(g)) for g in groups],
    }


@dataclass
class TrainResult:
    params: PolicyParams
    step: int
    rng_state: dict
    metrics: list[dict]
    shaping: list[dict]


def train(config: TrainConfig, dataset: Sequence[SceneSpec], *, threads: int = 1,
          on_step: Callable[[dict, dict], None] | None = None,
          on_checkpoint: Callable[[int, PolicyParams, dict], None] | None = None) -> TrainResult:
    """Run ``config.steps`` updates over batches drawn from ``dataset``.

    ``on_step(metrics, shaping)`` is called after each step;
    ``on_checkpoint(step, params, rng_state)`` every ``checkpoint_interval``
    steps when that is positive.
    """
    config.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    env = dataset[0].env
    if any(s.env != env for s in dataset):
        raise ValueError("dataset mixes environment configurations")
    params = prior_params(env, config.prior_gain, config.prior_count_slope)
    ref = params.copy()
    old = params.copy()
    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    metrics, shaping = [], []
    for step in range(1, config.steps + 1):
        idx = rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
        seeds = [[config.seed, step, j] for j in range(len(idx))]
        records = _rollouts([dataset[i] for i in idx], old, config, seeds, threads)
        stats = surrogate_stats(params, old, ref, records, config)
        if not math.isfinite(stats.objective):
            raise NonFiniteError(f"step {step}: non-finite objective {stats.objective}")
        params = update(params, stats.grad, config, anchor=ref)
        if step % config.old_policy_refresh_interval == 0:
            old = params.copy()
        m = step_metrics(step, records, stats)
        sh = shaping_entry(step, records)
        metrics.append(m)
        shaping.append(sh)
        if on_step:
            on_step(m, sh)
        if on_checkpoint and config.checkpoint_interval and step % config.checkpoint_interval == 0:
            on_checkpoint(step, params, rng.bit_generator.state)
    return TrainResult(params, config.steps, rng.bit_generator.state, metrics, shaping)


# -- evaluation --------------------------------------------------------------------

@dataclass
class EvalReport:
    n_scenes: int = 0
    n_objects: int = 0
    mean_iou: float | None = None
    acc_at_0_5: float | None = None
    count_acc: float | None = None
    mean_phi: float | None = None
    per_tier: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "n_scenes": self.n_scenes,
            "n_objects": self.n_objects,
            "mean_iou": self.mean_iou,
            "acc_at_0.5": self.acc_at_0_5,
            "count_acc": self.count_acc,
            "mean_phi": self.mean_phi,
        }
        if self.per_tier:
            d["per_tier"] = {k: v.to_dict() for k, v in self.per_tier.items()}
        return d


def _summarize(rows: list[tuple]) -> EvalReport:
    if not rows:
        return EvalReport()
    n_obj = sum(r[4] for r in rows)
    return EvalReport(
        n_scenes=len(rows),
        n_objects=n_obj,
        mean_iou=float(np.mean([r[0] for r in rows])),
        acc_at_0_5=sum(r[1] for r in rows) / n_obj,
        count_acc=float(np.mean([r[2] for r in rows])),
        mean_phi=float(np.mean([r[3] for r in rows])),
    )


def _eval_scene(params: PolicyParams, scene: SceneSpec, rng: np.random.Generator) -> tuple:
    logp = log_softmax(slot_features(scene, False) @ params.theta)
    trace = sample_traces(logp, 1, rng)[0]
    anchors = trace.anchors
    phi, miou, assignment = _Scorer(scene)(anchors)
    ious = _anchor_ious(scene)
    key = tuple(sorted(anchors))
    hits = sum(1 for i, j in assignment.pairs
               if assignment.is_real((i, j)) and ious[key[i], j] > SUCCESS_IOU)
    return (miou, hits, len(anchors) == scene.num_objects, phi, scene.num_objects)


def evaluate(params: PolicyParams, dataset: Sequence[SceneSpec], rng: np.random.Generator,
             threads: int = 1) -> EvalReport:
    """Single direct response per scene, no revision round.

    Reports mean matched IoU, Acc@0.5 pooled over ground-truth objects,
    counting accuracy (predicted count equals the true count) and mean
    alignment cost, overall and per difficulty tier.
    """
    seeds = rng.integers(0, 2**63 - 1, size=len(dataset)).tolist()
    jobs = list(zip(dataset, seeds))

    def one(job):
        scene, seed = job
        if scene.env != params.env:
            raise ValueError(f"scene {scene.id} environment does not match the policy")
        return _eval_scene(params, scene, np.random.default_rng(seed))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(one, jobs))
    else:
        rows = [one(j) for j in jobs]
    report = _summarize(rows)
    for tier in sorted({s.difficulty for s in dataset}):
        report.per_tier[tier] = _summarize([r for r, s in zip(rows, dataset) if s.difficulty == tier])
    return report


def revision_gain(params: PolicyParams, dataset: Sequence[SceneSpec], group_size: int, seed: int) -> tuple[float, float]:
    """Fraction of scenes whose group-best IoU exceeds 0.5, revised vs direct.

    Both groups come from the same policy on the same scene; the revised group
    is conditioned on a sampled initial response.
    """
    rev_cfg = TrainConfig(group_size=group_size)
    dir_cfg = TrainConfig(group_size=group_size, revision_enabled=False)
    rev = direct = 0
    for i, scene in enumerate(dataset):
        rev += rollout(scene, params, rev_cfg, np.random.default_rng([seed, i, 0])).best_iou > SUCCESS_IOU
        direct += rollout(scene, params, dir_cfg, np.random.default_rng([seed, i, 1])).best_iou > SUCCESS_IOU
    return rev / len(dataset), direct / len(dataset)

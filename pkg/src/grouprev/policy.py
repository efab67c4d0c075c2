"""Categorical grounding policy with closed-form probabilities and gradients.

Each slot picks one of ``K`` anchors or STOP from ``softmax(theta.T @ f)``
where the feature vector is::

    [descriptor (K+1) | slot one-hot (S+1) | revision flag (1) | initial summary (K+1)]

with ``S`` the slot limit. Once ``S`` anchors are emitted STOP is forced
(probability 1), so every trace ends with STOP.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, Point
from .response import Response
from .scenes import EnvConfig, SceneSpec, grid_for

CHECKPOINT_FORMAT = "grouprev-checkpoint"
CHECKPOINT_VERSION = 1


class TraceError(ValueError):
    pass


@dataclass
class PolicyParams:
    theta: np.ndarray
    env: EnvConfig

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=float)
        expected = (self.env.num_features, self.env.num_actions)
        if self.theta.shape != expected:
            raise ValueError(f"theta has shape {self.theta.shape}, expected {expected}")

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.theta.copy(), self.env)

    @property
    def stop(self) -> int:
        return self.env.num_anchors


def zero_params(env: EnvConfig) -> PolicyParams:
    return PolicyParams(np.zeros((env.num_features, env.num_actions)), env)


def prior_params(env: EnvConfig, gain: float = 5.0, count_slope: float = 5.0) -> PolicyParams:
    """Zero-shot starting point: follow the evidence, stop after the count cue.

    Anchor logits are ``gain * evidence``. The STOP logit is
    ``count_slope * (slot + 1/2 - cue) + log(K + e**gain)`` where the cue is
    the descriptor's STOP entry. The offset matches the anchor log-mass of a
    one-object scene, so STOP becomes the likelier action once the slot index
    passes the cued count.
    """
    p = zero_params(env)
    k, a = env.num_anchors, env.num_actions
    p.theta[np.arange(k), np.arange(k)] = gain
    p.theta[k, k] = -count_slope
    for s in range(env.max_slots + 1):
        p.theta[a + s, k] = count_slope * (s + 0.5) + np.logaddexp(np.log(k), gain)
    return p


# -- features -----------------------------------------------------------------

def initial_summary(choices: Sequence[int], env: EnvConfig) -> np.ndarray:
    """Normalized histogram of the anchors an initial response chose.

    An empty initial response puts all mass on the STOP entry.
    """
    k = env.num_anchors
    out = np.zeros(env.num_actions)
    anchors = [c for c in choices if c != k]
    if not anchors:
        out[k] = 1.0
        return out
    np.add.at(out, anchors, 1.0)
    return out / len(anchors)


def _descriptor(scene: SceneSpec, revision_round: bool, summary: np.ndarray | None) -> np.ndarray:
    if revision_round and summary is not None:
        return scene.reviewed_descriptor(np.flatnonzero(summary[:-1]))
    return scene.descriptor_array


def features(scene: SceneSpec, slot: int, revision_round: bool, summary: np.ndarray | None = None) -> np.ndarray:
    """Feature vector of one slot.

    In the revision round the descriptor block is the scene re-examined around
    the anchors the summary marks as proposed.
    """
    env = scene.env
    if not 0 <= slot <= env.max_slots:
        raise ValueError(f"slot {slot} outside [0, {env.max_slots}]")
    a = env.num_actions
    f = np.zeros(env.num_features)
    f[:a] = _descriptor(scene, revision_round, summary)
    f[a + slot] = 1.0
    f[a + env.max_slots + 1] = 1.0 if revision_round else 0.0
    if summary is not None:
        f[a + env.max_slots + 2:] = summary
    return f


def slot_features(scene: SceneSpec, revision_round: bool, summary: np.ndarray | None = None) -> np.ndarray:
    """Feature rows for the sampled slots ``0 .. S-1`` (slot ``S`` is forced STOP)."""
    env = scene.env
    a = env.num_actions
    fm = np.zeros((env.max_slots, env.num_features))
    fm[:, :a] = _descriptor(scene, revision_round, summary)
    fm[np.arange(env.max_slots), a + np.arange(env.max_slots)] = 1.0
    fm[:, a + env.max_slots + 1] = 1.0 if revision_round else 0.0
    if summary is not None:
        fm[:, a + env.max_slots + 2:] = summary
    return fm


# -- distributions -------------------------------------------------------------

def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def action_probs(params: PolicyParams, f: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(f @ params.theta))


def categorical_kl(logp: np.ndarray, logq: np.ndarray) -> np.ndarray:
    """``sum p (log p - log q)`` along the last axis."""
    return np.sum(np.exp(logp) * (logp - logq), axis=-1)


def kl_to_ref(params: PolicyParams, ref_params: PolicyParams, f: np.ndarray) -> float:
    logp = log_softmax(f @ params.theta)
    logq = log_softmax(f @ ref_params.theta)
    return max(0.0, float(categorical_kl(logp, logq)))


# -- traces ------------------------------------------------------------------------

@dataclass(frozen=True)
class ActionTrace:
    choices: tuple[int, ...]
    per_slot_logprobs: tuple[float, ...]

    @property
    def anchors(self) -> tuple[int, ...]:
        return self.choices[:-1]

    @property
    def log_prob(self) -> float:
        return float(sum(self.per_slot_logprobs))


def validate_trace(trace: ActionTrace, env: EnvConfig) -> None:
    stop = env.num_anchors
    c = trace.choices
    if not c or c[-1] != stop:
        raise TraceError("trace must end with STOP")
    if len(c) > env.max_slots + 1:
        raise TraceError(f"trace longer than {env.max_slots + 1} slots")
    if any(not 0 <= x < stop for x in c[:-1]):
        raise TraceError("only the final action may be STOP")
    if len(trace.per_slot_logprobs) != len(c):
        raise TraceError("one log-probability per choice required")


def sample_traces(logp: np.ndarray, n: int, rng: np.random.Generator) -> list[ActionTrace]:
    """Draw ``n`` traces from per-slot log-probabilities of shape ``(S, K+1)``."""
    n_slots, n_actions = logp.shape
    stop = n_actions - 1
    cdf = np.cumsum(np.exp(logp), axis=1)
    u = rng.random((n, n_slots)) * cdf[:, -1]
    draws = np.empty((n, n_slots), dtype=np.int64)
    for s in range(n_slots):
        draws[:, s] = np.minimum(np.searchsorted(cdf[s], u[:, s], side="right"), stop)
    traces = []
    for row in draws.tolist():
        try:
            end = row.index(stop)
            choices = row[:end + 1]
        except ValueError:
            choices = row + [stop]
        lps = [float(logp[s, a]) for s, a in enumerate(choices[:n_slots])]
        if len(choices) > n_slots:
            lps.append(0.0)
        traces.append(ActionTrace(tuple(choices), tuple(lps)))
    return traces


def trace_to_response(trace: ActionTrace, env: EnvConfig) -> Response:
    grid = grid_for(env)
    cells = grid.cells
    anchors = trace.anchors
    text = "anchors: " + (" ".join(str(a) for a in anchors) if anchors else "none")
    return Response(text, tuple(cells[a][0] for a in anchors), tuple(cells[a][1] for a in anchors))


def context_logprobs(params: PolicyParams, scene: SceneSpec, revision_round: bool,
                     summary: np.ndarray | None = None) -> np.ndarray:
    return log_softmax(slot_features(scene, revision_round, summary) @ params.theta)


def sample_response(params: PolicyParams, scene: SceneSpec, revision_round: bool,
                    summary: np.ndarray | None, rng: np.random.Generator) -> tuple[Response, ActionTrace]:
    logp = context_logprobs(params, scene, revision_round, summary)
    trace = sample_traces(logp, 1, rng)[0]
    return trace_to_response(trace, params.env), trace


def _trace_slots(trace: ActionTrace, env: EnvConfig) -> tuple[list[int], list[int]]:
    """Slots and actions that carry probability (the forced STOP does not)."""
    validate_trace(trace, env)
    n = min(len(trace.choices), env.max_slots)
    return list(range(n)), list(trace.choices[:n])


def log_prob(params: PolicyParams, scene: SceneSpec, revision_round: bool,
             summary: np.ndarray | None, trace: ActionTrace) -> float:
    slots, acts = _trace_slots(trace, params.env)
    logp = context_logprobs(params, scene, revision_round, summary)
    return float(logp[slots, acts].sum())


def log_prob_grad(params: PolicyParams, scene: SceneSpec, revision_round: bool,
                  summary: np.ndarray | None, trace: ActionTrace) -> np.ndarray:
    """Analytic gradient of :func:`log_prob` with respect to ``theta``."""
    slots, acts = _trace_slots(trace, params.env)
    fm = slot_features(scene, revision_round, summary)[slots]
    dz = -np.exp(log_softmax(fm @ params.theta))
    dz[np.arange(len(slots)), acts] += 1.0
    return fm.T @ dz


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, params: PolicyParams, step: int, rng_state: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": params.env.config_hash(),
        "env": params.env.to_dict(),
        "shape": list(params.theta.shape),
        "theta": params.theta.ravel().tolist(),
        "step": int(step),
        "rng_state": rng_state,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[PolicyParams, int, dict | None, str]:
    """Returns ``(params, step, rng_state, stored_config_hash)``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    env = EnvConfig.from_dict(doc["env"])
    theta = np.array(doc["theta"], dtype=float).reshape(doc["shape"])
    return PolicyParams(theta, env), int(doc["step"]), doc.get("rng_state"), doc["config_hash"]

"""Group-relative advantages and the clipped, KL-regularised surrogate.

The objective for one group is

    J = 1/|G| * sum_i 1/|o_i| * sum_t [ min(r_it * A_i, clip(r_it, 1-eps, 1+eps) * A_i)
                                        - beta * KL(pi(.|c_it) || pi_ref(.|c_it)) ]

with ``r_it = pi(o_it | c_it) / exp(behavior_logprob_it)``. Setting
``kl_inside_clip`` moves the KL penalty into the clipped branch of the
``min`` instead. Gradients are exact with respect to the logit rows of a
tabular policy.
"""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .buffer import SampleRecord

Gradient = dict  # context key -> np.ndarray over the vocabulary


class StdMode(str, enum.Enum):
    POPULATION = "population"
    SAMPLE = "sample"


class DegenerateGroupError(ValueError):
    """Zero reward spread with ``lam == 0`` leaves advantages undefined."""


@dataclass(frozen=True)
class AdvantageParams:
    alpha: float = 1.5
    lam: float = 1e-4
    std_mode: StdMode = StdMode.POPULATION

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        object.__setattr__(self, "std_mode", StdMode(self.std_mode))


@dataclass(frozen=True)
class ObjectiveParams:
    epsilon: float = 0.2
    beta: float = 0.0
    kl_inside_clip: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True)
class AdvantageBatch:
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    group_mean: float
    group_std: float


def group_advantages(rewards: Sequence[float], params: AdvantageParams = AdvantageParams()) -> AdvantageBatch:
    """``(R_i - mean) / (alpha * std + lam)`` over the (possibly mixed) group."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("rewards must be non-empty")
    if np.all(r == r[0]):
        # exact zeros; a float mean of equal values can drift by an ulp
        mean, std = float(r[0]), 0.0
    else:
        mean = float(r.mean())
        ddof = 1 if params.std_mode is StdMode.SAMPLE and r.size > 1 else 0
        std = float(r.std(ddof=ddof))
    denom = params.alpha * std + params.lam
    if denom == 0.0:
        raise DegenerateGroupError("all rewards equal and lam == 0")
    adv = (r - mean) / denom
    return AdvantageBatch(tuple(r.tolist()), tuple(adv.tolist()), mean, std)


class Policy(Protocol):
    def context_keys(self, uid: str, prompt: Sequence[int], response: Sequence[int]) -> list: ...

    def distribution(self, key) -> np.ndarray: ...

    def log_distribution(self, key) -> np.ndarray: ...


@dataclass(frozen=True)
class Member:
    """A trajectory scored for optimisation.

    ``prompt`` is the prefix the response was generated from; the policy
    uses it to rebuild the context of each token.
    """

    record: SampleRecord
    advantage: float
    prompt: tuple[int, ...]


def _check(member: Member) -> None:
    rec = member.record
    if len(rec.behavior_logprobs) != len(rec.response):
        raise ValueError(
            f"{rec.uid}: {len(rec.response)} tokens but {len(rec.behavior_logprobs)} behavior log-probs"
        )
    if len(rec.response) == 0:
        raise ValueError(f"{rec.uid}: empty response")


def kl_divergence(p_log: np.ndarray, q_log: np.ndarray) -> float:
    p = np.exp(p_log)
    return float(np.sum(p * (p_log - q_log)))


def surrogate_objective(
    policy: Policy,
    members: Sequence[Member],
    ref: Policy,
    params: ObjectiveParams = ObjectiveParams(),
) -> float:
    if not members:
        return 0.0
    lo, hi = 1.0 - params.epsilon, 1.0 + params.epsilon
    total = 0.0
    for m in members:
        _check(m)
        rec = m.record
        keys = policy.context_keys(rec.uid, m.prompt, rec.response)
        acc = 0.0
        for key, tok, blp in zip(keys, rec.response, rec.behavior_logprobs):
            logp = policy.log_distribution(key)
            ratio = math.exp(logp[tok] - blp)
            plain = ratio * m.advantage
            clipped = min(max(ratio, lo), hi) * m.advantage
            kl = kl_divergence(logp, ref.log_distribution(key)) if params.beta > 0 else 0.0
            if params.kl_inside_clip:
                acc += min(plain, clipped - params.beta * kl)
            else:
                acc += min(plain, clipped) - params.beta * kl
        total += acc / len(rec.response)
    return total / len(members)


def objective_gradient(
    policy: Policy,
    members: Sequence[Member],
    ref: Policy,
    params: ObjectiveParams = ObjectiveParams(),
) -> Gradient:
    """Exact gradient of :func:`surrogate_objective` w.r.t. each touched logit row."""
    if not members:
        return {}
    lo, hi = 1.0 - params.epsilon, 1.0 + params.epsilon
    beta = params.beta
    # d/dz log pi(tok) = onehot(tok) - pi, so per-row we only need the summed
    # coefficient and the per-token counts
    coef: dict = defaultdict(float)
    counts: dict = {}
    kl_weight: dict = defaultdict(float)
    G = len(members)
    for m in members:
        _check(m)
        rec = m.record
        A = m.advantage
        w = 1.0 / (G * len(rec.response))
        keys = policy.context_keys(rec.uid, m.prompt, rec.response)
        for key, tok, blp in zip(keys, rec.response, rec.behavior_logprobs):
            logp = policy.log_distribution(key)
            ratio = math.exp(logp[tok] - blp)
            inside = lo < ratio < hi
            if params.kl_inside_clip:
                kl = kl_divergence(logp, ref.log_distribution(key)) if beta > 0 else 0.0
                plain = ratio * A
                clipped = min(max(ratio, lo), hi) * A - beta * kl
                if plain <= clipped:
                    c = w * A * ratio
                else:
                    c = w * A * ratio if inside else 0.0
                    if beta > 0:
                        kl_weight[key] += w * beta
            else:
                clip_binds = (A > 0 and ratio > hi) or (A < 0 and ratio < lo)
                c = 0.0 if clip_binds else w * A * ratio
                if beta > 0:
                    kl_weight[key] += w * beta
            if c != 0.0:
                coef[key] += c
                row = counts.get(key)
                if row is None:
                    row = counts[key] = np.zeros(len(logp))
                row[tok] += c
    grad: Gradient = {}
    for key in set(coef) | set(kl_weight):
        probs = policy.distribution(key)
        g = np.zeros_like(probs)
        if key in coef:
            g += counts[key] - coef[key] * probs
        if kl_weight.get(key):
            logp = policy.log_distribution(key)
            ref_logp = ref.log_distribution(key)
            kl = float(np.sum(probs * (logp - ref_logp)))
            g -= kl_weight[key] * probs * (logp - ref_logp - kl)
        grad[key] = g
    return grad


def add_gradients(total: Gradient, part: Gradient) -> Gradient:
    for key, g in part.items():
        if key in total:
            total[key] = total[key] + g
        else:
            total[key] = g.copy()
    return total


def gradient_norm(grad: Gradient) -> float:
    return math.sqrt(sum(float(np.dot(g, g)) for g in grad.values()))


def apply_update(policy, grad: Gradient, lr: float):
    """One gradient-ascent step on the logit rows touched by ``grad``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    policy.add_to_rows(grad, lr)
    return policy

"""Entropy-structure ranking reward for failed or truncated trajectories.

Each trajectory is summarised by two numbers computed from its per-token
policy entropies: the mean over its most uncertain tokens (``peak``) and the
mean over all tokens (``global``). A trajectory dominates another when it has
strictly higher peak entropy and strictly lower global entropy. Dominance
counts are turned into a linear reward ramp from ``r_max`` down to 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True)
class EntropyProfile:
    peak: float
    global_: float
    k_top: int
    length: int


def token_entropy(dist: Sequence[float]) -> float:
    """Shannon entropy in nats, with ``0 * ln 0 = 0``."""
    p = np.asarray(dist, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("distribution must be a non-empty 1-D sequence")
    if np.any(p < 0):
        raise ValueError("distribution has negative entries")
    if abs(p.sum() - 1.0) > NORMALIZATION_TOL:
        raise ValueError(f"distribution sums to {p.sum()!r}, not 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def top_k_count(length: int, p: float) -> int:
    return max(1, math.floor(p * length))


def profile(entropies: Sequence[float], p: float = 0.2) -> EntropyProfile:
    if len(entropies) == 0:
        raise ValueError("entropy trace is empty")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    h = np.asarray(entropies, dtype=float)
    n = h.size
    k = top_k_count(n, p)
    top = np.sort(h)[n - k :]
    peak = float(top.mean())
    glob = float(h.mean())
    if h.min() == h.max():
        # constant trace: skip the float means, which can drift by an ulp
        peak = glob = float(h[0])
    elif k == n:
        peak = glob
    return EntropyProfile(peak=max(peak, glob), global_=glob, k_top=k, length=n)


def dominates(a: EntropyProfile, b: EntropyProfile) -> bool:
    return a.peak > b.peak and a.global_ < b.global_


def dominance_scores(profiles: Sequence[EntropyProfile]) -> list[int]:
    """Number of other profiles each profile dominates."""
    peaks = np.array([pr.peak for pr in profiles], dtype=float)
    globs = np.array([pr.global_ for pr in profiles], dtype=float)
    wins = (peaks[:, None] > peaks[None, :]) & (globs[:, None] < globs[None, :])
    return [int(s) for s in wins.sum(axis=1)]


def rank_rewards(scores: Sequence[int], r_max: float = 0.5) -> list[float]:
    """Linear rank reward; tied scores share the mean of their rank slots."""
    n = len(scores)
    if n == 0:
        raise ValueError("scores must be non-empty")
    if r_max <= 0:
        raise ValueError(f"r_max must be positive, got {r_max}")
    if n == 1:
        return [float(r_max)]
    slot = [r_max * (1.0 - k / (n - 1)) for k in range(n)]
    order = sorted(range(n), key=lambda i: -scores[i])
    out = [0.0] * n
    start = 0
    while start < n:
        stop = start
        while stop + 1 < n and scores[order[stop + 1]] == scores[order[start]]:
            stop += 1
        shared = sum(slot[start : stop + 1]) / (stop - start + 1)
        for pos in range(start, stop + 1):
            out[order[pos]] = shared
        start = stop + 1
    return out


def entropy_rank_rewards(
    traces: Sequence[Sequence[float]], p: float = 0.2, r_max: float = 0.5
) -> tuple[list[EntropyProfile], list[int], list[float]]:
    profs = [profile(t, p) for t in traces]
    scores = dominance_scores(profs)
    return profs, scores, rank_rewards(scores, r_max)

"""Self-reflection prompts for queries that keep failing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .buffer import SampleBuffer, reward_below


@dataclass(frozen=True)
class ReflectionTemplate:
    guidance: tuple[int, ...]
    history_window: int = 16
    hardness_threshold: float = 0.3

    def __post_init__(self) -> None:
        object.__setattr__(self, "guidance", tuple(int(t) for t in self.guidance))
        if not self.guidance:
            raise ValueError("guidance must be non-empty")
        if self.history_window < 1:
            raise ValueError(f"history_window must be >= 1, got {self.history_window}")
        if self.hardness_threshold < 0:
            raise ValueError(f"hardness threshold must be >= 0, got {self.hardness_threshold}")


@dataclass(frozen=True)
class Query:
    uid: str
    prompt: tuple[int, ...]
    reflection: bool = False


def is_hard(uid: str, buffer: SampleBuffer, template: ReflectionTemplate) -> bool:
    mean = buffer.history_mean_reward(uid, template.history_window)
    return mean is not None and mean < template.hardness_threshold


def build_reflection_query(
    prompt: Sequence[int],
    uid: str,
    buffer: SampleBuffer,
    template: ReflectionTemplate,
    rng: Optional[np.random.Generator] = None,
    failure_threshold: float = 1.0,
    max_length: Optional[int] = None,
) -> Optional[tuple[int, ...]]:
    """``prompt + past_failure + guidance``, or None without a stored failure.

    If ``max_length`` would be exceeded, the failure is cut short (its head
    is kept) so the guidance suffix always survives intact.
    """
    failures = buffer.retrieve(uid, reward_below(failure_threshold), 1, rng)
    if not failures:
        return None
    failed = list(failures[0].response)
    if max_length is not None:
        room = max_length - len(prompt) - len(template.guidance)
        if room < 0:
            return None
        failed = failed[:room]
    return tuple(prompt) + tuple(failed) + template.guidance


def augment_batch(
    batch: Sequence[Query],
    buffer: SampleBuffer,
    template: ReflectionTemplate,
    epoch: int,
    rng_for: Callable[[int], np.random.Generator],
    failure_threshold: float = 1.0,
    max_length: Optional[int] = None,
) -> list[Query]:
    """Original batch followed by one reflection variant per hard query.

    Only active after the first epoch. ``rng_for(i)`` supplies the stream
    used to pick the failure for the i-th query.
    """
    out = list(batch)
    if epoch <= 1:
        return out
    for i, q in enumerate(batch):
        if q.reflection or not is_hard(q.uid, buffer, template):
            continue
        aug = build_reflection_query(
            q.prompt, q.uid, buffer, template, rng_for(i), failure_threshold, max_length
        )
        if aug is not None:
            out.append(Query(q.uid, aug, reflection=True))
    return out

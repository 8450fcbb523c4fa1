"""Outcome reward with a length bonus for verified-correct responses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

TERMINATOR = 0


class ConfigError(ValueError):
    """Raised when a configuration value violates its documented range."""


@dataclass(frozen=True)
class RewardSpec:
    correct_reward: float = 1.0
    length_max: int = 32
    length_bonus_enabled: bool = True
    serr_rmax: float = 0.5

    def __post_init__(self) -> None:
        if self.length_max < 1:
            raise ConfigError(f"length_max must be >= 1, got {self.length_max}")
        if not 0.0 < self.serr_rmax < self.correct_reward:
            raise ConfigError(
                "serr_rmax must lie strictly between 0 and correct_reward "
                f"(got {self.serr_rmax} vs {self.correct_reward})"
            )


class Verifier(Protocol):
    def __call__(self, response: Sequence[int], gold: Sequence[int]) -> bool: ...


def verify(response: Sequence[int], gold: Sequence[int]) -> bool:
    """Exact match of the terminal answer span against ``gold``.

    The answer span is the ``len(gold)`` tokens immediately before the
    terminator, which must be the last token. Anything earlier in the
    response is free-form and ignored.
    """
    if len(gold) == 0:
        raise ValueError("gold answer must be non-empty")
    n = len(gold)
    if len(response) < n + 1 or response[-1] != TERMINATOR:
        return False
    return list(response[-n - 1 : -1]) == list(gold)


def length_bonus(length: int, length_max: int) -> float:
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    return max(0.0, 1.0 - length / length_max)


def total_reward(
    response: Sequence[int],
    gold: Sequence[int],
    spec: RewardSpec,
    verifier: Verifier = verify,
) -> float:
    """Outcome reward: ``correct_reward`` plus the length bonus when correct, else 0."""
    if not verifier(response, gold):
        return 0.0
    reward = spec.correct_reward
    if spec.length_bonus_enabled:
        reward += length_bonus(len(response), spec.length_max)
    return reward

"""Cross-context replay: refill homogeneous groups with opposing history."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .buffer import Origin, SampleBuffer, SampleRecord, reward_at_least, reward_below


class GroupClass(str, enum.Enum):
    ALL_POSITIVE = "all_positive"
    ALL_NEGATIVE = "all_negative"
    MIXED = "mixed"


def classify(rewards: Sequence[float], threshold: float = 1.0) -> GroupClass:
    if len(rewards) == 0:
        raise ValueError("cannot classify an empty group")
    positive = [r >= threshold for r in rewards]
    if all(positive):
        return GroupClass.ALL_POSITIVE
    if not any(positive):
        return GroupClass.ALL_NEGATIVE
    return GroupClass.MIXED


@dataclass(frozen=True)
class GroupMember:
    record: SampleRecord
    on_policy: bool
    prompt: tuple[int, ...]


@dataclass(frozen=True)
class Group:
    uid: str
    members: tuple[GroupMember, ...]
    classification: GroupClass
    starved: bool = False

    @property
    def rewards(self) -> list[float]:
        return [m.record.reward for m in self.members]

    @property
    def injected(self) -> int:
        return sum(not m.on_policy for m in self.members)

    def with_rewards(self, rewards: Sequence[float]) -> "Group":
        if len(rewards) != len(self.members):
            raise ValueError("one reward per member required")
        members = tuple(
            replace(m, record=m.record.with_reward(r)) for m, r in zip(self.members, rewards)
        )
        return replace(self, members=members)


def make_group(
    uid: str,
    records: Sequence[SampleRecord],
    prompt: Sequence[int],
    threshold: float = 1.0,
) -> Group:
    if not records:
        raise ValueError("group needs at least one record")
    if any(r.uid != uid for r in records):
        raise ValueError("all group members must share the group uid")
    members = tuple(GroupMember(r, True, tuple(prompt)) for r in records)
    return Group(uid, members, classify([r.reward for r in records], threshold))


def augment(
    group: Group,
    buffer: SampleBuffer,
    k_replay: int = 2,
    threshold: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    prompt_of: Optional[Callable[[SampleRecord], Sequence[int]]] = None,
) -> Group:
    """Append up to ``k_replay`` stored records with the opposite outcome.

    Mixed groups come back untouched. A homogeneous group with nothing to
    pair against is returned unchanged with ``starved=True``. ``prompt_of``
    recovers the generation prefix of a stored record (defaults to the
    prompt of the group's first member).
    """
    if k_replay < 1:
        raise ValueError(f"k_replay must be >= 1, got {k_replay}")
    if group.classification is GroupClass.MIXED:
        return group
    wanted = (
        reward_at_least(threshold)
        if group.classification is GroupClass.ALL_NEGATIVE
        else reward_below(threshold)
    )
    found = buffer.retrieve(group.uid, wanted, k_replay, rng)
    if not found:
        return replace(group, starved=True)
    default_prompt = group.members[0].prompt
    extra = tuple(
        GroupMember(
            rec.with_origin(Origin.REPLAYED),
            False,
            tuple(prompt_of(rec)) if prompt_of else default_prompt,
        )
        for rec in found
    )
    return replace(group, members=group.members + extra)

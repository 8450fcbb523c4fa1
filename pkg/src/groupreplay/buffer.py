"""Persistent per-query archive of generated trajectories."""

from __future__ import annotations

import enum
import json
import math
import threading
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Optional

import numpy as np

DEFAULT_CAPACITY = 100_000


class Origin(str, enum.Enum):
    ON_POLICY = "on_policy"
    REPLAYED = "replayed"
    REFLECTION = "reflection"


class RecordValidationError(ValueError):
    pass


class BufferFormatError(ValueError):
    """A persisted buffer line could not be parsed; ``line`` is 1-based."""

    def __init__(self, path: str | Path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = str(path)
        self.line = line


@dataclass(frozen=True)
class SampleRecord:
    uid: str
    response: tuple[int, ...]
    behavior_logprobs: tuple[float, ...]
    token_entropies: tuple[float, ...]
    reward: float
    truncated: bool
    epoch: int
    origin: Origin = Origin.ON_POLICY

    def __post_init__(self) -> None:
        # normalise sequences so records hash/compare by value
        object.__setattr__(self, "response", tuple(int(t) for t in self.response))
        object.__setattr__(
            self, "behavior_logprobs", tuple(float(x) for x in self.behavior_logprobs)
        )
        object.__setattr__(
            self, "token_entropies", tuple(float(x) for x in self.token_entropies)
        )
        object.__setattr__(self, "origin", Origin(self.origin))

    def __len__(self) -> int:
        return len(self.response)

    def validate(self, vocab_size: Optional[int] = None) -> None:
        n = len(self.response)
        if n < 1:
            raise RecordValidationError(f"{self.uid}: empty response")
        if len(self.behavior_logprobs) != n or len(self.token_entropies) != n:
            raise RecordValidationError(
                f"{self.uid}: length mismatch (response={n}, "
                f"logprobs={len(self.behavior_logprobs)}, "
                f"entropies={len(self.token_entropies)})"
            )
        if not math.isfinite(self.reward):
            raise RecordValidationError(f"{self.uid}: non-finite reward {self.reward}")
        if self.epoch < 0:
            raise RecordValidationError(f"{self.uid}: negative epoch {self.epoch}")
        upper = math.log(vocab_size) + 1e-9 if vocab_size else math.inf
        for h in self.token_entropies:
            if not (-1e-12 <= h <= upper):
                raise RecordValidationError(f"{self.uid}: token entropy {h} out of range")
        for lp in self.behavior_logprobs:
            if not (lp <= 1e-12) or math.isnan(lp):
                raise RecordValidationError(f"{self.uid}: invalid log-probability {lp}")

    def with_reward(self, reward: float) -> "SampleRecord":
        return SampleRecord(
            self.uid,
            self.response,
            self.behavior_logprobs,
            self.token_entropies,
            reward,
            self.truncated,
            self.epoch,
            self.origin,
        )

    def with_origin(self, origin: Origin) -> "SampleRecord":
        return SampleRecord(
            self.uid,
            self.response,
            self.behavior_logprobs,
            self.token_entropies,
            self.reward,
            self.truncated,
            self.epoch,
            origin,
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "uid": self.uid,
                "response": list(self.response),
                "behavior_logprobs": list(self.behavior_logprobs),
                "token_entropies": list(self.token_entropies),
                "reward": self.reward,
                "truncated": self.truncated,
                "epoch": self.epoch,
                "origin": self.origin.value,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        return cls(
            uid=str(d["uid"]),
            response=d["response"],
            behavior_logprobs=d["behavior_logprobs"],
            token_entropies=d["token_entropies"],
            reward=float(d["reward"]),
            truncated=bool(d["truncated"]),
            epoch=int(d["epoch"]),
            origin=Origin(d.get("origin", "on_policy")),
        )


RewardFilter = Callable[[float], bool]


def any_reward(_: float) -> bool:
    return True


class SampleBuffer:
    """Trajectory store keyed by query uid.

    All public methods take an internal lock, so rollout workers may insert
    and read concurrently. When ``capacity`` is exceeded the oldest record of
    the uid holding the most records is evicted (ties go to the uid whose
    oldest record is oldest overall).
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, vocab_size: Optional[int] = None):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.vocab_size = vocab_size
        self._by_uid: dict[str, deque[tuple[int, SampleRecord]]] = {}
        self._size = 0
        self._seq = 0
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return self._size

    def uids(self) -> list[str]:
        with self._lock:
            return list(self._by_uid)

    def records(self, uid: str) -> list[SampleRecord]:
        with self._lock:
            return [rec for _, rec in self._by_uid.get(uid, ())]

    def insert(self, record: SampleRecord) -> None:
        record.validate(self.vocab_size)
        with self._lock:
            self._by_uid.setdefault(record.uid, deque()).append((self._seq, record))
            self._seq += 1
            self._size += 1
            while self._size > self.capacity:
                self._evict_one()

    def _evict_one(self) -> None:
        victim = max(
            self._by_uid,
            key=lambda u: (len(self._by_uid[u]), -self._by_uid[u][0][0]),
        )
        entries = self._by_uid[victim]
        entries.popleft()
        if not entries:
            del self._by_uid[victim]
        self._size -= 1

    def retrieve(
        self,
        uid: str,
        reward_filter: RewardFilter = any_reward,
        limit: int = 1,
        rng: Optional[np.random.Generator] = None,
    ) -> list[SampleRecord]:
        """Up to ``limit`` records of ``uid`` whose reward passes the filter.

        When more records match than requested, a uniform subset is drawn
        from ``rng``; the result keeps insertion order.
        """
        if limit < 1:
            raise ValueError(f"limit must be >= 1, got {limit}")
        with self._lock:
            matches = [rec for _, rec in self._by_uid.get(uid, ()) if reward_filter(rec.reward)]
        if len(matches) <= limit:
            return matches
        if rng is None:
            rng = np.random.default_rng(0)
        picked = np.sort(rng.choice(len(matches), size=limit, replace=False))
        return [matches[i] for i in picked]

    def history_mean_reward(self, uid: str, window: int) -> Optional[float]:
        if window < 1:
            raise ValueError(f"window must be >= 1, got {window}")
        with self._lock:
            entries = self._by_uid.get(uid)
            if not entries:
                return None
            recent = [rec.reward for _, rec in list(entries)[-window:]]
        return math.fsum(recent) / len(recent)

    def iter_ordered(self) -> list[SampleRecord]:
        """All records in global insertion order."""
        with self._lock:
            merged = sorted(
                (entry for entries in self._by_uid.values() for entry in entries),
                key=lambda e: e[0],
            )
        return [rec for _, rec in merged]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.iter_ordered():
                fh.write(rec.to_json())
                fh.write("\n")

    @classmethod
    def load(
        cls,
        path: str | Path,
        capacity: int = DEFAULT_CAPACITY,
        vocab_size: Optional[int] = None,
    ) -> "SampleBuffer":
        buf = cls(capacity=capacity, vocab_size=vocab_size)
        for rec in read_records(path):
            buf.insert(rec)
        return buf


def read_records(path: str | Path) -> Iterator[SampleRecord]:
    """Parse a JSONL buffer file, naming the offending line on failure."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = SampleRecord.from_dict(json.loads(line))
                rec.validate()
            except (ValueError, KeyError, TypeError) as exc:
                raise BufferFormatError(path, lineno, str(exc) or type(exc).__name__) from exc
            yield rec


def reward_below(threshold: float) -> RewardFilter:
    return lambda r: r < threshold


def reward_at_least(threshold: float) -> RewardFilter:
    return lambda r: r >= threshold

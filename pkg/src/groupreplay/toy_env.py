"""Synthetic verifiable tasks and an exact tabular softmax policy.

A task asks the policy to emit its gold answer followed by the terminator
token 0. The policy is an order-``m`` Markov model: the next-token logits
depend on the task uid and the last ``m`` tokens of prompt + response.
Logits that were never updated come from a deterministic prior, which is
where task difficulty lives:

* most gold-path contexts are confident "chain" steps towards the next gold
  token;
* a few gold-path positions are forks with a nearly flat distribution, where
  the gold token is one option among many;
* off-path contexts carry deterministic per-context jitter plus a pull
  towards repeating the token two back, so failed attempts tend to settle
  into low-entropy loops and run into the length limit.

Prompt and reflection-guidance tokens use ids ``>= vocab_size`` so they can
appear in contexts but are never generated.
"""

from __future__ import annotations

import bisect
import enum
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .buffer import Origin, SampleRecord
from .rewarding import TERMINATOR, verify

BOS = -1
ContextKey = tuple  # (uid, (t_1, ..., t_m))


class Difficulty(str, enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"
    EXTREME = "extreme"


@dataclass(frozen=True)
class Task:
    uid: str
    prompt: tuple[int, ...]
    gold_answer: tuple[int, ...]
    difficulty: Difficulty

    def to_json(self) -> str:
        return json.dumps(
            {
                "uid": self.uid,
                "prompt": list(self.prompt),
                "gold": list(self.gold_answer),
                "difficulty": self.difficulty.value,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        return cls(
            uid=str(d["uid"]),
            prompt=tuple(int(t) for t in d["prompt"]),
            gold_answer=tuple(int(t) for t in d["gold"]),
            difficulty=Difficulty(d["difficulty"]),
        )


@dataclass(frozen=True)
class DifficultyPrior:
    gold_length: int  # 0: one token longer than the truncation limit
    chain_bonus: float  # gold-token logit bonus on non-fork gold-path contexts
    forks: tuple[int, ...] = ()  # gold-path positions with a flat next-token prior
    fork_every: int = 0  # additionally, every n-th position is a fork (0: off)
    terminator_logit: float = 0.0  # terminator logit off the gold path


DEFAULT_PRIORS: dict[Difficulty, DifficultyPrior] = {
    Difficulty.EASY: DifficultyPrior(gold_length=2, chain_bonus=3.0),
    Difficulty.MEDIUM: DifficultyPrior(gold_length=3, chain_bonus=5.0, forks=(2,)),
    Difficulty.HARD: DifficultyPrior(gold_length=4, chain_bonus=5.0, forks=(2, 3)),
    Difficulty.EXTREME: DifficultyPrior(
        gold_length=0, chain_bonus=5.0, fork_every=4, terminator_logit=-30.0
    ),
}


@dataclass
class EnvConfig:
    vocab_size: int = 16
    context_order: int = 2
    t_max: int = 32
    prompt_length: int = 3
    jitter: float = 1.0  # std of off-path logits
    fork_jitter: float = 0.1  # std of logits at fork contexts
    loop_bonus: float = 5.0  # off-path pull towards repeating the token two back
    priors: dict[Difficulty, DifficultyPrior] = field(default_factory=lambda: dict(DEFAULT_PRIORS))

    def __post_init__(self) -> None:
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.context_order < 1:
            raise ValueError(f"context_order must be >= 1, got {self.context_order}")
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")

    @property
    def prompt_base(self) -> int:
        return self.vocab_size

    @property
    def guidance_base(self) -> int:
        return self.vocab_size + 1000


def _stable_seed(*parts: int | str) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, str):
            out.append(zlib.crc32(p.encode()))
        else:
            out.append(int(p) + 2)  # BOS is -1; SeedSequence wants non-negative
    return out


def _softmax_entry(logits: np.ndarray):
    z = logits - logits.max()
    e = np.exp(z)
    s = e.sum()
    probs = e / s
    logp = z - math.log(s)
    nz = probs > 0
    ent = float(-(probs[nz] * logp[nz]).sum())
    cdf = np.cumsum(probs).tolist()
    return probs, logp, cdf, max(ent, 0.0)


class TabularPolicy:
    """Softmax policy over ``vocab_size`` tokens with one logit row per context.

    Rows are materialised lazily from ``prior`` (zeros when no prior is
    given). Distributions are cached per context and invalidated when a row
    changes.
    """

    def __init__(
        self,
        vocab_size: int = 16,
        context_order: int = 2,
        prior: Optional[Callable[[ContextKey], np.ndarray]] = None,
    ):
        if vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4, got {vocab_size}")
        if context_order < 1:
            raise ValueError(f"context_order must be >= 1, got {context_order}")
        self.vocab_size = vocab_size
        self.context_order = context_order
        self.prior = prior
        self.logits: dict[ContextKey, np.ndarray] = {}
        self._cache: dict[ContextKey, tuple] = {}

    # -- contexts -----------------------------------------------------------
    def context_key(self, uid: str, history: Sequence[int]) -> ContextKey:
        m = self.context_order
        tail = tuple(history[-m:])
        if len(tail) < m:
            tail = (BOS,) * (m - len(tail)) + tail
        return (uid, tail)

    def context_keys(self, uid: str, prompt: Sequence[int], response: Sequence[int]) -> list[ContextKey]:
        """Context of every response position (the state each token was sampled in)."""
        hist = list(prompt[-self.context_order :])
        keys = []
        for tok in response:
            keys.append(self.context_key(uid, hist))
            hist.append(tok)
        return keys

    # -- parameters ---------------------------------------------------------
    def row(self, key: ContextKey) -> np.ndarray:
        """Current logits for ``key`` (materialised; safe to read, not to mutate)."""
        row = self.logits.get(key)
        if row is None:
            if self.prior is None:
                row = np.zeros(self.vocab_size)
            else:
                row = np.array(self.prior(key), dtype=float)
                if row.shape != (self.vocab_size,):
                    raise ValueError(f"prior returned shape {row.shape} for {key}")
            self.logits[key] = row
        return row

    def set_row(self, key: ContextKey, values: np.ndarray) -> None:
        self.logits[key] = np.array(values, dtype=float)
        self._cache.pop(key, None)

    def _entry(self, key: ContextKey) -> tuple:
        entry = self._cache.get(key)
        if entry is None:
            entry = _softmax_entry(self.row(key))
            self._cache[key] = entry
        return entry

    def distribution(self, key: ContextKey) -> np.ndarray:
        return self._entry(key)[0]

    def log_distribution(self, key: ContextKey) -> np.ndarray:
        return self._entry(key)[1]

    def entropy(self, key: ContextKey) -> float:
        return self._entry(key)[3]

    def log_prob(self, key: ContextKey, token: int) -> float:
        return float(self._entry(key)[1][token])

    def add_to_rows(self, delta: dict[ContextKey, np.ndarray], scale: float = 1.0) -> None:
        for key, d in delta.items():
            self.logits[key] = self.row(key) + scale * d
            self._cache.pop(key, None)

    def copy(self) -> "TabularPolicy":
        other = TabularPolicy(self.vocab_size, self.context_order, self.prior)
        other.logits = {k: v.copy() for k, v in self.logits.items()}
        return other

    # -- serialisation ------------------------------------------------------
    def to_json(self) -> str:
        rows = [
            {"uid": key[0], "context": list(key[1]), "logits": self.logits[key].tolist()}
            for key in sorted(self.logits, key=lambda k: (k[0], k[1]))
        ]
        return json.dumps(
            {"vocab_size": self.vocab_size, "context_order": self.context_order, "rows": rows}
        )

    @classmethod
    def from_json(cls, text: str, prior=None) -> "TabularPolicy":
        d = json.loads(text)
        pol = cls(d["vocab_size"], d["context_order"], prior)
        for row in d["rows"]:
            pol.logits[(row["uid"], tuple(row["context"]))] = np.array(row["logits"], dtype=float)
        return pol


class TaskPrior:
    """Deterministic initial logits for every (task, context) pair."""

    def __init__(self, tasks: Iterable[Task], env: EnvConfig, seed: int = 0):
        self.tasks = {t.uid: t for t in tasks}
        self.env = env
        self.seed = seed

    def gold_position(self, task: Task, context: tuple[int, ...]) -> Optional[int]:
        """Number of gold tokens already emitted if ``context`` lies on the gold path."""
        V = self.env.vocab_size
        m = len(context)
        gold = task.gold_answer

        def reserved(t: int) -> bool:
            return t < 0 or t >= V

        for j in range(len(gold) + 1):
            if j < m:
                if reserved(context[m - j - 1]) and tuple(context[m - j :]) == gold[:j]:
                    return j
            elif tuple(context) == gold[j - m : j]:
                return j
        return None

    def is_fork(self, spec: DifficultyPrior, pos: int) -> bool:
        return pos in spec.forks or (spec.fork_every > 0 and pos > 0 and pos % spec.fork_every == 0)

    def __call__(self, key: ContextKey) -> np.ndarray:
        uid, context = key
        task = self.tasks[uid]
        spec = self.env.priors[task.difficulty]
        V = self.env.vocab_size
        rng = np.random.default_rng(_stable_seed(self.seed, uid, *context))
        noise = rng.standard_normal(V)
        pos = self.gold_position(task, context)
        if pos is None:
            logits = self.env.jitter * noise
            prev = context[-2] if len(context) >= 2 else BOS
            if 0 < prev < V:
                logits[prev] += self.env.loop_bonus
            logits[TERMINATOR] = spec.terminator_logit
            return logits
        gold = task.gold_answer
        nxt = gold[pos] if pos < len(gold) else TERMINATOR
        if self.is_fork(spec, pos):
            logits = self.env.fork_jitter * noise
            logits[TERMINATOR] = spec.terminator_logit
            return logits
        logits = self.env.jitter * noise
        logits[TERMINATOR] = spec.terminator_logit
        if nxt == TERMINATOR and spec.gold_length == 0:
            # answer longer than the budget: finishing is never on the path
            return logits
        logits[nxt] = max(logits.max(), 0.0) + spec.chain_bonus
        return logits


def _distinct_ngram_sequence(rng: np.random.Generator, length: int, vocab: int, n: int) -> tuple[int, ...]:
    while True:
        seq: list[int] = []
        for _ in range(length):
            choices = [t for t in range(1, vocab) if not seq or t != seq[-1]]
            seq.append(int(rng.choice(choices)))
        grams = [tuple(seq[i : i + n]) for i in range(max(0, length - n + 1))]
        if len(grams) == len(set(grams)):
            return tuple(seq)


def make_suite(
    seed: int,
    counts: dict[Difficulty, int] | Sequence[int],
    env: Optional[EnvConfig] = None,
) -> list[Task]:
    """Deterministic task suite; ``counts`` is per difficulty (easy..extreme)."""
    env = env or EnvConfig()
    if not isinstance(counts, dict):
        counts = dict(zip(Difficulty, counts))
    if any(c < 0 for c in counts.values()):
        raise ValueError("counts must be non-negative")
    rng = np.random.default_rng(_stable_seed(seed, "suite"))
    tasks = []
    i = 0
    for diff in Difficulty:
        spec = env.priors[diff]
        length = spec.gold_length if spec.gold_length > 0 else env.t_max
        for _ in range(counts.get(diff, 0)):
            prompt = tuple(
                int(t) for t in env.prompt_base + rng.choice(900, size=env.prompt_length, replace=False)
            )
            gold = _distinct_ngram_sequence(rng, length, env.vocab_size, env.context_order)
            tasks.append(Task(uid=f"q{i}", prompt=prompt, gold_answer=gold, difficulty=diff))
            i += 1
    return tasks


def make_policy(tasks: Iterable[Task], env: EnvConfig, seed: int = 0) -> TabularPolicy:
    return TabularPolicy(env.vocab_size, env.context_order, TaskPrior(tasks, env, seed))


def save_suite(tasks: Iterable[Task], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(t.to_json() + "\n")


def load_suite(path: str | Path) -> list[Task]:
    with open(path, encoding="utf-8") as fh:
        return [Task.from_dict(json.loads(line)) for line in fh if line.strip()]


def rollout(
    policy: TabularPolicy,
    uid: str,
    prompt: Sequence[int],
    max_tokens: int,
    rng: np.random.Generator,
    epoch: int = 0,
    origin: Origin = Origin.ON_POLICY,
) -> SampleRecord:
    """Sample one response; the returned record has ``reward`` set to NaN."""
    if max_tokens < 1:
        raise ValueError(f"max_tokens must be >= 1, got {max_tokens}")
    m = policy.context_order
    V = policy.vocab_size
    hist = list(prompt[-m:])
    if len(hist) < m:
        hist = [BOS] * (m - len(hist)) + hist
    uniforms = rng.random(max_tokens)
    response: list[int] = []
    logps: list[float] = []
    ents: list[float] = []
    truncated = True
    for t in range(max_tokens):
        _, logp, cdf, ent = policy._entry((uid, tuple(hist[-m:])))
        tok = min(bisect.bisect_right(cdf, uniforms[t] * cdf[-1]), V - 1)
        response.append(tok)
        logps.append(float(logp[tok]))
        ents.append(ent)
        hist.append(tok)
        if tok == TERMINATOR:
            truncated = False
            break
    return SampleRecord(
        uid=uid,
        response=tuple(response),
        behavior_logprobs=tuple(logps),
        token_entropies=tuple(ents),
        reward=math.nan,
        truncated=truncated,
        epoch=epoch,
        origin=origin,
    )


def solve_rate(
    policy: TabularPolicy,
    task: Task,
    n: int,
    rng: np.random.Generator,
    max_tokens: int = 32,
) -> float:
    hits = 0
    for _ in range(n):
        rec = rollout(policy, task.uid, task.prompt, max_tokens, rng)
        hits += verify(rec.response, task.gold_answer)
    return hits / n


def truncation_rate(
    policy: TabularPolicy, task: Task, n: int, rng: np.random.Generator, max_tokens: int = 32
) -> float:
    return sum(
        rollout(policy, task.uid, task.prompt, max_tokens, rng).truncated for _ in range(n)
    ) / n

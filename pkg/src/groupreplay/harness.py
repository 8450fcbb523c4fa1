"""End-to-end training loop, baselines, metrics and run artefacts."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .buffer import Origin, SampleBuffer, SampleRecord, read_records
from .config import Mode, TrainConfig
from .entropy_rank import entropy_rank_rewards, profile
from .optimizer import (
    DegenerateGroupError,
    Gradient,
    Member,
    add_gradients,
    apply_update,
    group_advantages,
    objective_gradient,
)
from .reflection import Query, augment_batch
from .replay import Group, GroupClass, augment, make_group
from .rewarding import total_reward
from .toy_env import (
    Difficulty,
    TabularPolicy,
    Task,
    make_policy,
    make_suite,
    rollout,
    save_suite,
    solve_rate,
)

log = logging.getLogger(__name__)

COMPARE_HEADER = [
    "step",
    "mode",
    "seed",
    "mean_reward",
    "solve_all",
    "solve_none",
    "entropy",
    "replay_injections",
    "reflection_activations",
]


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    """Named, seed-derived RNG stream; independent of call order elsewhere."""
    return np.random.default_rng([seed, zlib.crc32(name.encode()), *index])


@dataclass
class StepMetrics:
    step: int
    epoch: int
    mean_reward: float
    solve_all_frac: float
    solve_none_frac: float
    mean_policy_entropy: float
    replay_injections: int
    reflection_activations: int
    serr_groups: int
    starved_groups: int
    dropped_groups: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrainResult:
    config: TrainConfig
    policy: TabularPolicy
    metrics: list[StepMetrics]
    buffer: SampleBuffer
    tasks: list[Task]
    solve_rates: dict[str, float] = field(default_factory=dict)


def stratified_order(tasks: Sequence[Task], seed: int, epoch: int) -> list[Task]:
    """Shuffle within each difficulty, then interleave the strata round-robin.

    Keeps the difficulty mix of every batch constant, so per-step metrics
    are not dominated by batch composition.
    """
    strata = []
    for i, diff in enumerate(Difficulty):
        members = [t for t in tasks if t.difficulty is diff]
        perm = stream(seed, "order", epoch, i).permutation(len(members))
        strata.append([members[j] for j in perm])
    out = []
    longest = max((len(s) for s in strata), default=0)
    for pos in range(longest):
        for s in strata:
            if pos < len(s):
                out.append(s[pos])
    return out


class Trainer:
    """Holds run state; :meth:`step` executes one batch of the training loop."""

    def __init__(self, config: TrainConfig, tasks: Optional[Sequence[Task]] = None):
        config.validate()
        self.config = config
        self.env = config.env_config()
        self.tasks = list(tasks) if tasks is not None else make_suite(
            config.env.suite_seed, config.suite_counts(), self.env
        )
        self.by_uid = {t.uid: t for t in self.tasks}
        self.policy = make_policy(self.tasks, self.env, seed=config.env.suite_seed)
        self.ref = self.policy.copy()
        self.buffer = SampleBuffer(config.buffer_capacity, self.env.vocab_size)
        self.reward_spec = config.reward_spec()
        self.threshold = config.positivity_threshold
        self.template = config.reflection_template()
        self.objective = config.objective_params()
        self.metrics: list[StepMetrics] = []
        self.step_count = 0

    # generation prefix of a stored record, used to rebuild token contexts
    def prompt_of(self, rec: SampleRecord) -> tuple[int, ...]:
        if rec.origin is Origin.REFLECTION:
            return self.config.reflection.guidance
        return self.by_uid[rec.uid].prompt

    def batches(self, epoch: int) -> list[list[Task]]:
        order = stratified_order(self.tasks, self.config.seed, epoch)
        bs = self.config.batch_size
        return [order[i : i + bs] for i in range(0, len(order), bs)]

    def sample_groups(self, queries: Sequence[Query], epoch: int) -> tuple[list[Group], float, int]:
        cfg = self.config
        groups = []
        ent_sum = 0.0
        n_tok = 0
        for qi, q in enumerate(queries):
            rng = stream(cfg.seed, "rollout", self.step_count, qi)
            origin = Origin.REFLECTION if q.reflection else Origin.ON_POLICY
            gold = self.by_uid[q.uid].gold_answer
            recs = []
            for _ in range(cfg.group_size):
                rec = rollout(self.policy, q.uid, q.prompt, self.env.t_max, rng, epoch, origin)
                recs.append(rec.with_reward(total_reward(rec.response, gold, self.reward_spec)))
                ent_sum += math.fsum(rec.token_entropies)
                n_tok += len(rec.response)
            groups.append(make_group(q.uid, recs, q.prompt, self.threshold))
        return groups, ent_sum, n_tok

    def shape_group(self, group: Group, gi: int, counters: dict) -> Optional[Group]:
        """Mode-specific handling of a freshly sampled group (None = dropped)."""
        cfg = self.config
        cls = group.classification
        if cfg.mode is Mode.DAPO:
            if cls is not GroupClass.MIXED:
                counters["dropped"] += 1
                return None
            return group
        if cfg.mode is not Mode.R3:
            return group
        if cls is GroupClass.ALL_NEGATIVE and cfg.serr.enabled:
            traces = [m.record.token_entropies for m in group.members]
            _, _, rewards = entropy_rank_rewards(traces, cfg.serr.p, cfg.r_max)
            group = group.with_rewards(rewards)
            counters["serr"] += 1
        if cls is not GroupClass.MIXED and cfg.replay.enabled:
            group = augment(
                group,
                self.buffer,
                cfg.replay.k,
                self.threshold,
                stream(cfg.seed, "replay", self.step_count, gi),
                self.prompt_of,
            )
            counters["injections"] += group.injected
            counters["starved"] += int(group.starved)
        return group

    def group_gradient(self, group: Group) -> Gradient:
        params = self.config.advantage_params(replayed=group.injected > 0)
        try:
            adv = group_advantages(group.rewards, params)
        except DegenerateGroupError:
            return {}
        members = [
            Member(m.record, a, m.prompt) for m, a in zip(group.members, adv.advantages)
        ]
        return objective_gradient(self.policy, members, self.ref, self.objective)

    def step(self, epoch: int, batch: Sequence[Task]) -> StepMetrics:
        cfg = self.config
        self.step_count += 1
        queries = [Query(t.uid, t.prompt) for t in batch]
        if cfg.mode is Mode.R3 and cfg.reflection.enabled:
            queries = augment_batch(
                queries,
                self.buffer,
                self.template,
                epoch,
                lambda i: stream(cfg.seed, "reflect", self.step_count, i),
                self.threshold,
                cfg.reflection.max_prompt_length,
            )
        groups, ent_sum, n_tok = self.sample_groups(queries, epoch)

        originals = groups[: len(batch)]
        outcome = [r for g in originals for r in g.rewards]
        solve_all = sum(g.classification is GroupClass.ALL_POSITIVE for g in originals)
        solve_none = sum(g.classification is GroupClass.ALL_NEGATIVE for g in originals)

        counters = {"serr": 0, "injections": 0, "starved": 0, "dropped": 0}
        total: Gradient = {}
        to_store: list[SampleRecord] = []
        for gi, group in enumerate(groups):
            shaped = self.shape_group(group, gi, counters)
            kept = shaped if shaped is not None else group
            to_store.extend(m.record for m in kept.members if m.on_policy)
            if shaped is not None:
                add_gradients(total, self.group_gradient(shaped))

        for rec in to_store:
            self.buffer.insert(rec)
        if total:
            apply_update(self.policy, total, cfg.opt.lr)

        metrics = StepMetrics(
            step=self.step_count,
            epoch=epoch,
            mean_reward=math.fsum(outcome) / len(outcome),
            solve_all_frac=solve_all / len(originals),
            solve_none_frac=solve_none / len(originals),
            mean_policy_entropy=ent_sum / n_tok,
            replay_injections=counters["injections"],
            reflection_activations=len(queries) - len(batch),
            serr_groups=counters["serr"],
            starved_groups=counters["starved"],
            dropped_groups=counters["dropped"],
        )
        self.metrics.append(metrics)
        return metrics

    def run(self, on_step: Optional[Callable[[StepMetrics], None]] = None) -> TrainResult:
        for epoch in range(1, self.config.epochs + 1):
            for batch in self.batches(epoch):
                m = self.step(epoch, batch)
                if on_step:
                    on_step(m)
        rates = (
            evaluate(self.policy, self.tasks, self.config.eval_rollouts, self.config.seed, self.env.t_max)
            if self.config.eval_rollouts > 0
            else {}
        )
        return TrainResult(self.config, self.policy, self.metrics, self.buffer, self.tasks, rates)


def train(
    config: TrainConfig,
    tasks: Optional[Sequence[Task]] = None,
    on_step: Optional[Callable[[StepMetrics], None]] = None,
) -> TrainResult:
    return Trainer(config, tasks).run(on_step)


def evaluate(
    policy: TabularPolicy, tasks: Sequence[Task], n: int, seed: int, t_max: int = 32
) -> dict[str, float]:
    """Mean per-task solve rate on the original prompts, per difficulty."""
    per: dict[str, list[float]] = {}
    for i, task in enumerate(tasks):
        rate = solve_rate(policy, task, n, stream(seed, "eval", i), t_max)
        per.setdefault(task.difficulty.value, []).append(rate)
    return {d: float(np.mean(v)) for d, v in per.items()}


def write_run(result: TrainResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for m in result.metrics:
            fh.write(m.to_json() + "\n")
    result.buffer.save(out / "buffer.jsonl")
    save_suite(result.tasks, out / "suite.jsonl")
    (out / "policy.json").write_text(result.policy.to_json(), encoding="utf-8")
    (out / "config.json").write_text(json.dumps(result.config.to_dict(), indent=2), encoding="utf-8")
    if result.solve_rates:
        (out / "solve_rates.json").write_text(json.dumps(result.solve_rates, indent=2), encoding="utf-8")
    return out


# -- comparisons -----------------------------------------------------------------


@dataclass
class ComparisonRun:
    label: str
    seed: int
    metrics: list[StepMetrics]
    solve_rates: dict[str, float]


def run_comparison(
    configs: Sequence[TrainConfig],
    seeds: Iterable[int],
    on_run: Optional[Callable[[ComparisonRun], None]] = None,
) -> list[ComparisonRun]:
    if len(configs) < 2:
        raise ValueError("compare needs at least two configurations")
    runs = []
    for cfg in configs:
        for seed in seeds:
            cfg_seed = TrainConfig.from_dict({**cfg.to_dict(), "seed": seed})
            res = train(cfg_seed)
            run = ComparisonRun(cfg.label, seed, res.metrics, res.solve_rates)
            runs.append(run)
            if on_run:
                on_run(run)
    return runs


def median_trajectory(runs: Sequence[ComparisonRun], attr: str) -> list[float]:
    steps = min(len(r.metrics) for r in runs)
    return [statistics.median(getattr(r.metrics[s], attr) for r in runs) for s in range(steps)]


def median_solve_rates(runs: Sequence[ComparisonRun]) -> dict[str, float]:
    keys = sorted({k for r in runs for k in r.solve_rates})
    return {k: statistics.median(r.solve_rates.get(k, 0.0) for r in runs) for k in keys}


def _row(step, label, seed, m: dict) -> list:
    return [
        step,
        label,
        seed,
        m["mean_reward"],
        m["solve_all_frac"],
        m["solve_none_frac"],
        m["mean_policy_entropy"],
        m["replay_injections"],
        m["reflection_activations"],
    ]


def write_comparison(runs: Sequence[ComparisonRun], out_csv: str | Path) -> tuple[Path, Path]:
    """Per-run and median trajectories to ``out_csv``; final per-stratum solve
    rates to ``<stem>.strata.csv`` next to it."""
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    labels = list(dict.fromkeys(r.label for r in runs))
    attrs = [
        "mean_reward",
        "solve_all_frac",
        "solve_none_frac",
        "mean_policy_entropy",
        "replay_injections",
        "reflection_activations",
    ]
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(COMPARE_HEADER)
        for r in runs:
            for m in r.metrics:
                w.writerow(_row(m.step, r.label, r.seed, asdict(m)))
        for label in labels:
            group = [r for r in runs if r.label == label]
            med = {a: median_trajectory(group, a) for a in attrs}
            for s in range(len(med["mean_reward"])):
                w.writerow(_row(s + 1, label, "median", {a: med[a][s] for a in attrs}))
    strata_csv = out_csv.with_name(out_csv.stem + ".strata.csv")
    with open(strata_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "seed", "difficulty", "solve_rate"])
        for r in runs:
            for diff, rate in sorted(r.solve_rates.items()):
                w.writerow([r.label, r.seed, diff, rate])
        for label in labels:
            for diff, rate in median_solve_rates([r for r in runs if r.label == label]).items():
                w.writerow([label, "median", diff, rate])
    return out_csv, strata_csv


def compare(
    configs: Sequence[TrainConfig], seeds: Iterable[int], out_csv: str | Path
) -> list[ComparisonRun]:
    runs = run_comparison(configs, list(seeds))
    write_comparison(runs, out_csv)
    return runs


# -- buffer inspection -------------------------------------------------------------


def inspect_buffer(path: str | Path, uid: Optional[str] = None, p: float = 0.2) -> list[str]:
    """One line per stored record (optionally only ``uid``)."""
    lines = []
    for rec in read_records(path):
        if uid is not None and rec.uid != uid:
            continue
        prof = profile(rec.token_entropies, p)
        lines.append(
            f"{rec.uid}\treward={rec.reward:.4f}\torigin={rec.origin.value}\t"
            f"truncated={str(rec.truncated).lower()}\tlength={len(rec.response)}\t"
            f"epoch={rec.epoch}\tE_peak={prof.peak:.4f}\tE_global={prof.global_:.4f}"
        )
    return lines

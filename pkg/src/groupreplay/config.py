"""Training configuration and its TOML representation.

Keys mirror the TOML layout::

    mode = "r3"            # r3 | grpo | dapo
    epochs = 12
    group_size = 8
    batch_size = 16
    seed = 0

    [reward]   correct, length_bonus, l_max, serr_rmax
    [serr]     p, r_max, enabled
    [replay]   k, positivity_threshold, enabled
    [reflection] tau, window, guidance, enabled, max_prompt_length
    [opt]      alpha, lambda, epsilon, beta, lr, std_mode, kl_inside_clip
    [env]      vocab_size, context_order, t_max, suite_seed, easy, medium, hard, extreme,
               jitter, fork_jitter, loop_bonus
"""

from __future__ import annotations

import enum
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .optimizer import AdvantageParams, ObjectiveParams, StdMode
from .reflection import ReflectionTemplate
from .rewarding import ConfigError, RewardSpec
from .toy_env import Difficulty, EnvConfig


class Mode(str, enum.Enum):
    R3 = "r3"
    GRPO = "grpo"
    DAPO = "dapo"


@dataclass
class RewardSection:
    correct: float = 1.0
    length_bonus: bool = True
    l_max: Optional[int] = None  # None: use env.t_max
    serr_rmax: Optional[float] = None  # alias of serr.r_max


@dataclass
class SerrSection:
    p: float = 0.2
    r_max: float = 0.5
    enabled: bool = True


@dataclass
class ReplaySection:
    k: int = 2
    positivity_threshold: Optional[float] = None  # None: reward.correct
    enabled: bool = True


@dataclass
class ReflectionSection:
    tau: float = 0.3
    window: int = 16
    guidance: tuple[int, ...] = (1016, 1017)
    enabled: bool = True
    max_prompt_length: int = 64


@dataclass
class OptSection:
    alpha: float = 1.5
    lam: float = 1e-4
    epsilon: float = 0.2
    beta: float = 0.0
    lr: float = 0.05
    std_mode: str = "population"
    kl_inside_clip: bool = False


@dataclass
class EnvSection:
    vocab_size: int = 16
    context_order: int = 2
    t_max: int = 32
    suite_seed: int = 0
    easy: int = 16
    medium: int = 16
    hard: int = 16
    extreme: int = 16
    jitter: float = 1.0
    fork_jitter: float = 0.1
    loop_bonus: float = 5.0


@dataclass
class TrainConfig:
    mode: Mode = Mode.R3
    name: Optional[str] = None
    epochs: int = 12
    group_size: int = 8
    batch_size: int = 16
    seed: int = 0
    eval_rollouts: int = 64
    buffer_capacity: int = 100_000
    reward: RewardSection = field(default_factory=RewardSection)
    serr: SerrSection = field(default_factory=SerrSection)
    replay: ReplaySection = field(default_factory=ReplaySection)
    reflection: ReflectionSection = field(default_factory=ReflectionSection)
    opt: OptSection = field(default_factory=OptSection)
    env: EnvSection = field(default_factory=EnvSection)

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        self.reflection.guidance = tuple(int(t) for t in self.reflection.guidance)

    @property
    def label(self) -> str:
        return self.name or self.mode.value

    # -- derived parameter objects -----------------------------------------
    @property
    def r_max(self) -> float:
        return self.serr.r_max if self.reward.serr_rmax is None else self.reward.serr_rmax

    @property
    def positivity_threshold(self) -> float:
        t = self.replay.positivity_threshold
        return self.reward.correct if t is None else t

    def reward_spec(self) -> RewardSpec:
        return RewardSpec(
            correct_reward=self.reward.correct,
            length_max=self.reward.l_max or self.env.t_max,
            length_bonus_enabled=self.reward.length_bonus,
            serr_rmax=self.r_max,
        )

    def env_config(self) -> EnvConfig:
        return EnvConfig(
            vocab_size=self.env.vocab_size,
            context_order=self.env.context_order,
            t_max=self.env.t_max,
            jitter=self.env.jitter,
            fork_jitter=self.env.fork_jitter,
            loop_bonus=self.env.loop_bonus,
        )

    def suite_counts(self) -> dict[Difficulty, int]:
        return {
            Difficulty.EASY: self.env.easy,
            Difficulty.MEDIUM: self.env.medium,
            Difficulty.HARD: self.env.hard,
            Difficulty.EXTREME: self.env.extreme,
        }

    def advantage_params(self, replayed: bool) -> AdvantageParams:
        # GRPO/DAPO use the plain normalisation; the damping factor only
        # applies to groups that actually carry replayed members
        alpha = self.opt.alpha if (self.mode is Mode.R3 and replayed) else 1.0
        return AdvantageParams(alpha=alpha, lam=self.opt.lam, std_mode=StdMode(self.opt.std_mode))

    def objective_params(self) -> ObjectiveParams:
        return ObjectiveParams(
            epsilon=self.opt.epsilon, beta=self.opt.beta, kl_inside_clip=self.opt.kl_inside_clip
        )

    def reflection_template(self) -> ReflectionTemplate:
        return ReflectionTemplate(
            guidance=self.reflection.guidance,
            history_window=self.reflection.window,
            hardness_threshold=self.reflection.tau,
        )

    # -- validation ----------------------------------------------------------
    def validate(self) -> None:
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1 (got {self.epochs})")
        if self.mode in (Mode.R3, Mode.GRPO, Mode.DAPO) and self.group_size < 2:
            problems.append(f"group_size must be >= 2 (got {self.group_size})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.eval_rollouts < 0:
            problems.append("eval_rollouts must be >= 0")
        if self.buffer_capacity < 1:
            problems.append("buffer_capacity must be >= 1")
        if not 0.0 < self.serr.p <= 1.0:
            problems.append(f"serr.p must be in (0, 1] (got {self.serr.p})")
        if self.replay.k < 1:
            problems.append(f"replay.k must be >= 1 (got {self.replay.k})")
        if not 0.0 <= self.reflection.tau < self.reward.correct:
            problems.append(f"reflection.tau must be in [0, reward.correct) (got {self.reflection.tau})")
        if len(self.reflection.guidance) < self.env.context_order:
            problems.append("reflection.guidance must be at least env.context_order tokens long")
        if any(t < self.env.vocab_size for t in self.reflection.guidance):
            problems.append("reflection.guidance tokens must be >= env.vocab_size (reserved range)")
        if self.opt.lr <= 0:
            problems.append(f"opt.lr must be > 0 (got {self.opt.lr})")
        if self.opt.std_mode not in {m.value for m in StdMode}:
            problems.append(f"opt.std_mode must be one of population/sample (got {self.opt.std_mode})")
        for builder in (self.reward_spec, self.objective_params, self.reflection_template, self.env_config):
            try:
                builder()
            except ValueError as exc:
                problems.append(str(exc))
        try:
            AdvantageParams(alpha=self.opt.alpha, lam=self.opt.lam)
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))

    # -- (de)serialisation ----------------------------------------------------
    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["opt"]["lambda"] = d["opt"].pop("lam")
        d["reflection"]["guidance"] = list(self.reflection.guidance)
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        data = dict(data)
        sections = {
            "reward": RewardSection,
            "serr": SerrSection,
            "replay": ReplaySection,
            "reflection": ReflectionSection,
            "opt": OptSection,
            "env": EnvSection,
        }
        kwargs: dict[str, Any] = {}
        given: dict[str, set] = {}
        for name, klass in sections.items():
            raw = dict(data.pop(name, {}) or {})
            given[name] = set(raw)
            if name == "opt" and "lambda" in raw:
                raw["lam"] = raw.pop("lambda")
            known = {f.name for f in fields(klass)}
            unknown = set(raw) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
            kwargs[name] = klass(**raw)
        rs = kwargs["reward"].serr_rmax
        if rs is not None and "r_max" in given["serr"] and rs != kwargs["serr"].r_max:
            raise ConfigError("reward.serr_rmax and serr.r_max disagree")
        known = {f.name for f in fields(cls)} - set(sections)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        try:
            cfg = cls(**data, **kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def from_toml(cls, path: str | Path) -> "TrainConfig":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        cfg = cls.from_dict(data)
        if cfg.name is None:
            cfg.name = Path(path).stem
        return cfg

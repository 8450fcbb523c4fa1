"""Group-relative policy optimisation with replay, self-reflection and
entropy-ranked rewards for failed rollouts, on an exact tabular backend."""

from .buffer import Origin, SampleBuffer, SampleRecord
from .config import Mode, TrainConfig
from .entropy_rank import EntropyProfile, dominance_scores, profile, rank_rewards, token_entropy
from .harness import StepMetrics, TrainResult, compare, train
from .optimizer import (
    AdvantageParams,
    ObjectiveParams,
    group_advantages,
    objective_gradient,
    surrogate_objective,
)
from .replay import GroupClass, augment, classify
from .rewarding import ConfigError, RewardSpec, length_bonus, total_reward, verify
from .toy_env import Difficulty, EnvConfig, TabularPolicy, Task, make_suite, rollout

__version__ = "0.1.0"

__all__ = [
    "AdvantageParams",
    "ConfigError",
    "Difficulty",
    "EntropyProfile",
    "EnvConfig",
    "GroupClass",
    "Mode",
    "ObjectiveParams",
    "Origin",
    "RewardSpec",
    "SampleBuffer",
    "SampleRecord",
    "StepMetrics",
    "TabularPolicy",
    "Task",
    "TrainConfig",
    "TrainResult",
    "augment",
    "classify",
    "compare",
    "dominance_scores",
    "group_advantages",
    "length_bonus",
    "make_suite",
    "objective_gradient",
    "profile",
    "rank_rewards",
    "rollout",
    "surrogate_objective",
    "token_entropy",
    "total_reward",
    "train",
    "verify",
]

"""Group-relative policy optimisation arithmetic.

Pure functions over supplied rewards and probability ratios: within-group
advantage normalisation, the clipped importance-weighted surrogate with an
optional KL penalty, and binary exact-match rewards.
"""

import logging
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np

from utils.errors import InvalidInputError, RangeError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_ADVANTAGE_EPS = 1e-4
DEFAULT_CLIP_EPS = 0.2


@dataclass(frozen=True)
class RewardGroup:
    """Rewards of G completions sampled for one prompt."""

    rewards: np.ndarray
    epsilon: float = DEFAULT_ADVANTAGE_EPS

    def __post_init__(self):
        rewards = np.asarray(self.rewards, dtype=np.float64)
        if rewards.ndim != 1 or rewards.shape[0] < 2:
            raise InvalidInputError(f"a reward group needs at least 2 rewards, got shape {rewards.shape}")
        if not np.all(np.isfinite(rewards)):
            raise InvalidInputError("rewards must be finite")
        if self.epsilon < 0:
            raise RangeError(f"epsilon must be >= 0, got {self.epsilon}")
        object.__setattr__(self, "rewards", rewards)

    @property
    def size(self) -> int:
        return int(self.rewards.shape[0])


@dataclass(frozen=True)
class SurrogateInputs:
    advantages: np.ndarray
    logprob_ratios: np.ndarray
    clip_eps: float = DEFAULT_CLIP_EPS
    kl_coef: float = 0.0
    kl_estimates: Optional[np.ndarray] = None

    def __post_init__(self):
        advantages = np.asarray(self.advantages, dtype=np.float64)
        ratios = np.asarray(self.logprob_ratios, dtype=np.float64)
        if advantages.ndim != 1 or advantages.shape != ratios.shape:
            raise ShapeError(
                f"advantages {advantages.shape} and ratios {ratios.shape} must be equal-length vectors",
                expected=advantages.shape,
                actual=ratios.shape,
            )
        if advantages.size == 0:
            raise InvalidInputError("surrogate inputs are empty")
        if np.any(ratios <= 0) or not np.all(np.isfinite(ratios)):
            raise InvalidInputError("probability ratios must be finite and positive")
        if self.clip_eps < 0:
            raise RangeError(f"clip_eps must be >= 0, got {self.clip_eps}")
        if self.kl_coef < 0:
            raise RangeError(f"kl_coef must be >= 0, got {self.kl_coef}")
        object.__setattr__(self, "advantages", advantages)
        object.__setattr__(self, "logprob_ratios", ratios)
        if self.kl_estimates is not None:
            kl = np.asarray(self.kl_estimates, dtype=np.float64)
            if kl.shape != advantages.shape:
                raise ShapeError("kl_estimates must match advantages", expected=advantages.shape, actual=kl.shape)
            object.__setattr__(self, "kl_estimates", kl)


def group_advantages(group: RewardGroup) -> np.ndarray:
    """(r_i - mean) / (population std + epsilon)."""
    r = group.rewards
    centered = r - r.mean()
    return centered / (r.std() + group.epsilon)


def clipped_surrogate(s: SurrogateInputs) -> float:
    """Mean of -min(rho * A, clip(rho, 1 - eps_c, 1 + eps_c) * A), plus the KL term."""
    rho, adv = s.logprob_ratios, s.advantages
    unclipped = rho * adv
    clipped = np.clip(rho, 1.0 - s.clip_eps, 1.0 + s.clip_eps) * adv
    loss = float(-np.mean(np.minimum(unclipped, clipped)))
    if s.kl_coef > 0 and s.kl_estimates is not None:
        loss += s.kl_coef * float(np.mean(s.kl_estimates))
    return loss


def surrogate_ratio_gradient(s: SurrogateInputs) -> np.ndarray:
    """Derivative of the surrogate with respect to each ratio.

    Zero where the clipped branch is selected and the ratio lies outside the
    clip range, and zero for every element of a zero-advantage group.
    """
    rho, adv = s.logprob_ratios, s.advantages
    lo, hi = 1.0 - s.clip_eps, 1.0 + s.clip_eps
    unclipped = rho * adv
    clipped = np.clip(rho, lo, hi) * adv
    live = (unclipped <= clipped) | ((rho >= lo) & (rho <= hi))
    return np.where(live, -adv / rho.shape[0], 0.0)


def _normalise(value: Any) -> Any:
    if isinstance(value, str):
        return value.strip()
    if isinstance(value, np.generic):
        return value.item()
    return value


def binary_reward(pred: Any, target: Any) -> int:
    """1 on exact match (strings compared after stripping whitespace), else 0."""
    return int(_normalise(pred) == _normalise(target))


def group_rewards(preds: Sequence[Any], target: Any) -> RewardGroup:
    return RewardGroup(rewards=np.array([binary_reward(p, target) for p in preds], dtype=np.float64))
